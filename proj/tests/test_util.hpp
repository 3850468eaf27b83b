#pragma once

#include <random>

#include "nucleiforge/tensor.hpp"

namespace nf::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

inline Tensor random_binary(Shape shape, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution dist(p);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = dist(rng) ? 1.0 : 0.0;
  return t;
}

}  // namespace nf::testing
