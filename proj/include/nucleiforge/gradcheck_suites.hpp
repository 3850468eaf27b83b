#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nucleiforge/gradcheck.hpp"
#include "nucleiforge/model.hpp"

namespace nf {

struct GradCheckCase {
  std::string name;
  std::vector<Shape> shapes;
  ScalarProgram program;
  double lo = -1.0;
  double hi = 1.0;
};

/// One finite-difference program per differentiable primitive.
std::vector<GradCheckCase> primitive_cases();

/// sum(y ⊙ R) with R drawn from `seed`, so every output element gets a
/// distinct sensitivity.
Tensor weighted_probe(const Tensor& y, std::uint64_t seed);

struct SuiteEntry {
  std::string op;
  double worst = 0.0;  // worst relative error over all checked coordinates
  double tolerance = 0.0;
  bool passed() const { return worst < tolerance; }
};

/// Small model used by the decoder and full-model suites.
ModelConfig toy_model_config();

/// scope: "primitives", "cgrl", "decoder" or "full".
std::vector<SuiteEntry> run_gradcheck_suite(const std::string& scope, std::uint64_t seed = 0);

/// Finite-difference check of every trainable parameter group of the toy
/// model through encode, CGRL, base decode and the high-resolution path.
/// Upstream of the reversal layer the numeric side differentiates the
/// linearized surrogate X0 + r⊙(X − X0) with r = −λ on auxiliary rows and 0
/// on primary rows, which is what the conditional backward computes.
std::vector<SuiteEntry> full_model_gradcheck(std::uint64_t seed, std::size_t coords_per_param = 4);

}  // namespace nf
