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

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mulalign/numerics.hpp"

namespace mulalign {

struct NamedTensor {
  std::string name;
  Mat<double>* value = nullptr;
};

struct BlockGradients {
  Mat<double> input;               // same shape as the block input (may be empty)
  std::vector<Mat<double>> params;  // one per DiffBlock::params entry, same order
};

/// A differentiable unit with hand-written backward. `params` point into
/// storage owned elsewhere; grad_check perturbs them in place and restores.
struct DiffBlock {
  std::string name;
  std::vector<NamedTensor> params;
  std::function<Mat<double>(const Mat<double>&)> forward;
  std::function<BlockGradients(const Mat<double>& input, const Mat<double>& upstream)>
      backward;
};

struct GradCheckReport {
  std::string block;
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Gradients smaller than this are compared on an absolute scale.
inline constexpr double kGradCheckFloor = 1e-5;

inline double gradcheck_rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

/// Central finite-difference check of every parameter and input entry.
/// Non-scalar outputs are reduced to sum(output * R) for a fixed random R.
inline GradCheckReport grad_check(const DiffBlock& block, Mat<double> input,
                                  double eps, double tol,
                                  std::uint64_t reduction_seed = 17) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw Error("grad_check: eps must lie in [1e-7, 1e-3]");

  const Mat<double> y0 = block.forward(input);
  Mat<double> reduction(y0.rows(), y0.cols(), 1.0);
  if (y0.size() != 1) {
    std::mt19937_64 rng(reduction_seed);
    reduction = randn<double>(y0.rows(), y0.cols(), 1.0, rng);
  }
  const BlockGradients grads = block.backward(input, reduction);
  if (grads.params.size() != block.params.size())
    throw Error("grad_check: " + block.name + " returned " +
                std::to_string(grads.params.size()) + " parameter gradients for " +
                std::to_string(block.params.size()) + " parameters");

  GradCheckReport report;
  report.block = block.name;

  auto objective = [&](const Mat<double>& x, const std::string& what) {
    const double v = dot_all(block.forward(x), reduction);
    if (!std::isfinite(v))
      throw Error("grad_check: non-finite loss while perturbing " + what);
    return v;
  };

  auto check_tensor = [&](Mat<double>& target, const Mat<double>& analytic,
                          const std::string& name, bool is_input) {
    if (!analytic.same_shape(target))
      throw Error("grad_check: gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target[i];
      target[i] = saved + eps;
      const double fp = objective(input, name);
      target[i] = saved - eps;
      const double fm = objective(input, name);
      target[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = gradcheck_rel_err(analytic[i], numeric);
      ++report.entries_checked;
      if (err > report.max_rel_err || report.worst_tensor.empty()) {
        report.max_rel_err = err;
        report.worst_tensor = is_input ? "<input>" : name;
        report.worst_index = i;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
    }
  };

  for (std::size_t p = 0; p < block.params.size(); ++p)
    check_tensor(*block.params[p].value, grads.params[p], block.params[p].name, false);
  if (!input.empty()) check_tensor(input, grads.input, "<input>", true);

  report.passed = report.max_rel_err <= tol;
  return report;
}

}  // namespace mulalign
