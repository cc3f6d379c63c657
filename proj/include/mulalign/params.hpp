// Copyright 2026 The MulAlign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

#include <string>
#include <vector>

#include "mulalign/numerics.hpp"

namespace mulalign {

/// Learning-rate tier a parameter belongs to.
enum class ParamGroup { backbone, refinement };

inline const char* to_string(ParamGroup g) {
  return g == ParamGroup::backbone ? "backbone" : "refinement";
}

struct ParamInfo {
  ParamGroup group = ParamGroup::backbone;
  bool decay = true;  // false for norms, biases, temperatures, loss scalars
};

template <class T>
struct ParamRef {
  std::string name;
  Mat<T>* value = nullptr;
  ParamInfo info;
};

// Every parameterized type exposes
//   template <class Self, class F> static void visit(Self& self, F&& f)
// calling f(name, Mat&, ParamInfo) for each tensor in a fixed order.

template <class M>
std::vector<ParamRef<typename M::scalar_type>> collect_params(M& model) {
  std::vector<ParamRef<typename M::scalar_type>> out;
  M::visit(model, [&](const std::string& name, auto& m, ParamInfo info) {
    out.push_back({name, &m, info});
  });
  return out;
}

/// Copy of `model` with every parameter zeroed; used as a gradient buffer.
template <class M>
M zeros_like(const M& model) {
  M out = model;
  M::visit(out, [](const std::string&, auto& m, ParamInfo) { m.fill(0); });
  return out;
}

template <class M>
void zero_params(M& model) {
  M::visit(model, [](const std::string&, auto& m, ParamInfo) { m.fill(0); });
}

/// acc += other, parameter by parameter.
template <class M>
void accumulate_params(M& acc, const M& other) {
  auto a = collect_params(acc);
  auto b = collect_params(const_cast<M&>(other));
  for (std::size_t i = 0; i < a.size(); ++i) axpy(*a[i].value, *b[i].value);
}

template <class M>
std::size_t count_params(const M& model) {
  std::size_t n = 0;
  M::visit(model, [&](const std::string&, const auto& m, ParamInfo) { n += m.size(); });
  return n;
}

}  // namespace mulalign
