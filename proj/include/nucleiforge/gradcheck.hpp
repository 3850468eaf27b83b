#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "nucleiforge/tensor.hpp"

namespace nf {

using ScalarProgram = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates checked per input; 0 checks all of them. When smaller than
  /// the input size, coordinates are drawn without replacement from `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_input;
};

/// |analytic - numeric| / max(1, |analytic|, |numeric|)
double grad_rel_error(double analytic, double numeric);

/// Compares tape gradients of `f` at `point` against central differences.
GradCheckResult grad_check(const ScalarProgram& f, std::vector<Tensor> point,
                           const GradCheckOptions& options = {});

}  // namespace nf
