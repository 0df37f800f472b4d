#pragma once

// Central-difference gradient checks over every differentiable op and each full model
// variant at desk shapes, in double precision. Shared by the CLI and the acceptance runner.

#include <string>
#include <vector>

#include "mnet/tensor.hpp"

namespace mnet {

struct GradSuiteCase {
  std::string name;
  ad::GradCheckReport report;
};

struct GradSuiteOptions {
  double tol = 1e-4;
  std::uint64_t seed = 1;
};

std::vector<GradSuiteCase> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace mnet
