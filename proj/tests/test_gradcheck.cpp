#include <gtest/gtest.h>

#include "mulalign/gradcheck_suite.hpp"

namespace mulalign {
namespace {

TEST(GradCheckSuite, EveryBlockPasses) {
  for (auto& c : gradcheck_cases()) {
    const auto r = run_gradcheck_case(c);
    std::printf("%-40s %.3e %s[%zu] a=%.6e n=%.6e (%zu)\n", c.name.c_str(), r.max_rel_err,
                r.worst_tensor.c_str(), r.worst_index, r.worst_analytic, r.worst_numeric,
                r.entries_checked);
    EXPECT_TRUE(r.passed) << c.name;
  }
}

}  // namespace
}  // namespace mulalign
