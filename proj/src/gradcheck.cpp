#include "nucleiforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nucleiforge/tape.hpp"

namespace nf {

double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const ScalarProgram& f, std::vector<Tensor> point,
                           const GradCheckOptions& options) {
  std::vector<Tensor> inputs;
  inputs.reserve(point.size());
  for (auto& p : point) inputs.push_back(p.clone().set_requires_grad(true));

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f(inputs);
    auto grads = tape.backward(loss);
    for (const auto& in : inputs) {
      auto g = grads.grad(in);
      analytic.push_back(g ? *g : Tensor::zeros(in.shape()));
    }
  }

  NoGradScope no_grad;
  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords && options.max_coords < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
    }
    std::vector<Tensor> probe;
    for (const auto& in : inputs) probe.push_back(in.detach().clone());
    double worst = 0.0;
    for (auto j : coords) {
      const double x0 = probe[i][j];
      probe[i].mutable_data()[j] = x0 + options.step;
      const double up = f(probe).item();
      probe[i].mutable_data()[j] = x0 - options.step;
      const double down = f(probe).item();
      probe[i].mutable_data()[j] = x0;
      const double numeric = (up - down) / (2.0 * options.step);
      worst = std::max(worst, grad_rel_error(analytic[i][j], numeric));
    }
    result.per_input.push_back(worst);
    result.max_rel_error = std::max(result.max_rel_error, worst);
  }
  return result;
}

}  // namespace nf
