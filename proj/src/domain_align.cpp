#include "nucleiforge/domain_align.hpp"

#include <algorithm>
#include <stdexcept>

namespace nf {

AlignMode parse_align_mode(const std::string& s) {
  if (s == "none") return AlignMode::None;
  if (s == "grl") return AlignMode::Grl;
  if (s == "cgrl") return AlignMode::Cgrl;
  throw std::invalid_argument("align.mode must be none, grl or cgrl, got '" + s + "'");
}

std::string to_string(AlignMode mode) {
  switch (mode) {
    case AlignMode::None: return "none";
    case AlignMode::Grl: return "grl";
    case AlignMode::Cgrl: return "cgrl";
  }
  return "none";
}

DomainWeights domain_weights(const std::map<int, std::size_t>& dataset_sizes, int primary_id) {
  auto it = dataset_sizes.find(primary_id);
  if (it == dataset_sizes.end()) {
    throw std::invalid_argument("domain_weights: primary domain " + std::to_string(primary_id) +
                                " has no dataset");
  }
  std::size_t n_aux = 0;
  for (const auto& [id, n] : dataset_sizes) {
    if (n == 0) throw std::invalid_argument("domain_weights: domain " + std::to_string(id) + " is empty");
    if (id != primary_id) n_aux += n;
  }
  const double n_main = static_cast<double>(it->second);
  if (n_aux == 0) return {1.0, 1.0};
  const double total = n_main + static_cast<double>(n_aux);
  return {total / (2.0 * n_main), total / (2.0 * static_cast<double>(n_aux))};
}

std::vector<double> cgrl_backward(std::span<const double> upstream, std::size_t cols,
                                  std::span<const DomainLabel> labels, double lambda) {
  std::vector<double> out(upstream.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].is_primary) continue;
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = -lambda * upstream[i * cols + j];
  }
  return out;
}

namespace {

void check_features(const char* kind, const Tensor& features) {
  if (features.rank() != 2) throw ShapeError(std::string(kind) + ": features must be N×C, got " + shape_str(features.shape()));
  if (features.dim(0) == 0 || features.dim(1) == 0) {
    throw ShapeError(std::string(kind) + ": empty feature batch " + shape_str(features.shape()));
  }
}

}  // namespace

Tensor cgrl(const Tensor& features, std::span<const DomainLabel> labels, double lambda) {
  check_features("cgrl", features);
  if (labels.size() != features.dim(0)) {
    throw ShapeError("cgrl: " + std::to_string(labels.size()) + " labels for a batch of " +
                     std::to_string(features.dim(0)));
  }
  if (lambda < 0.0) throw AttrError("cgrl: lambda must be non-negative");
  const std::size_t cols = features.dim(1);
  std::vector<DomainLabel> saved(labels.begin(), labels.end());
  const Tensor inputs[] = {features};
  return custom_op("cgrl", inputs, features, [saved, cols, lambda](const std::vector<double>& g) {
    return std::vector<std::vector<double>>{cgrl_backward(g, cols, saved, lambda)};
  });
}

Tensor grl(const Tensor& features, double lambda) {
  check_features("grl", features);
  if (lambda < 0.0) throw AttrError("grl: lambda must be non-negative");
  const Tensor inputs[] = {features};
  return custom_op("grl", inputs, features, [lambda](const std::vector<double>& g) {
    std::vector<double> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = -lambda * g[i];
    return std::vector<std::vector<double>>{std::move(out)};
  });
}

Discriminator Discriminator::create(ParamStore& store, const std::string& name, std::size_t in_dim,
                                    std::size_t hidden_dim, Rng& rng) {
  return {Linear::create(store, name + ".hidden", in_dim, hidden_dim, true, rng),
          Linear::create(store, name + ".out", hidden_dim, 1, true, rng)};
}

Tensor Discriminator::operator()(const Tensor& features) const {
  if (features.rank() != 2 || features.dim(1) != input_dim()) {
    throw ShapeError("discriminator: expected N×" + std::to_string(input_dim()) + ", got " +
                     shape_str(features.shape()));
  }
  return sigmoid(out(relu(hidden(features))));
}

Tensor cgrl_loss(const AlignmentBatch& batch, const Discriminator& discriminator) {
  check_features("cgrl_loss", batch.features);
  const std::size_t n = batch.features.dim(0);
  if (batch.labels.size() != n) {
    throw ShapeError("cgrl_loss: " + std::to_string(batch.labels.size()) + " labels for a batch of " +
                     std::to_string(n));
  }
  Tensor reversed;
  switch (batch.mode) {
    case AlignMode::Cgrl: reversed = cgrl(batch.features, batch.labels, batch.lambda); break;
    case AlignMode::Grl: reversed = grl(batch.features, batch.lambda); break;
    case AlignMode::None: reversed = batch.features.detach(); break;
  }
  Tensor prob = discriminator(reversed);
  Tensor target({n, 1}), weights({n, 1});
  auto t = target.mutable_data();
  auto w = weights.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = batch.labels[i].is_primary ? 1.0 : 0.0;
    w[i] = batch.labels[i].is_primary ? batch.weights.w_main : batch.weights.w_aux;
  }
  return bce(prob, target, weights);
}

double lambda_at(double lambda, double warmup_frac, std::size_t step, std::size_t total_steps) {
  if (warmup_frac <= 0.0 || total_steps == 0) return lambda;
  const double warm = warmup_frac * static_cast<double>(total_steps);
  return lambda * std::min(1.0, static_cast<double>(step) / warm);
}

}  // namespace nf
