#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "nucleiforge/nn.hpp"

namespace nf {

struct DomainLabel {
  int domain_id = 0;
  bool is_primary = true;  // y_i
};

enum class AlignMode { None, Grl, Cgrl };

AlignMode parse_align_mode(const std::string& s);
std::string to_string(AlignMode mode);

/// Class weights of the adversarial loss, inversely proportional to the
/// number of primary and auxiliary images.
struct DomainWeights {
  double w_main = 1.0;
  double w_aux = 1.0;
};

/// w_main = T / (2·n_main), w_aux = T / (2·n_aux) with T = n_main + n_aux, so
/// that w_main·n_main == w_aux·n_aux == T/2.
DomainWeights domain_weights(const std::map<int, std::size_t>& dataset_sizes, int primary_id);

/// Identity in the forward pass. Backward: row i of the upstream gradient is
/// scaled by -lambda for auxiliary rows and zeroed for primary rows.
/// features: N×C.
Tensor cgrl(const Tensor& features, std::span<const DomainLabel> labels, double lambda);

/// Unconditional gradient reversal: every row scaled by -lambda.
Tensor grl(const Tensor& features, double lambda);

/// The per-row transform cgrl applies to an upstream gradient.
std::vector<double> cgrl_backward(std::span<const double> upstream, std::size_t cols,
                                  std::span<const DomainLabel> labels, double lambda);

/// C -> hidden -> 1 MLP with ReLU and sigmoid output: probability that a
/// feature vector came from the primary domain.
struct Discriminator {
  Linear hidden;
  Linear out;

  static Discriminator create(ParamStore& store, const std::string& name, std::size_t in_dim,
                              std::size_t hidden_dim, Rng& rng);
  /// features N×C -> probabilities N×1
  Tensor operator()(const Tensor& features) const;
  std::size_t input_dim() const { return hidden.in_features(); }
};

struct AlignmentBatch {
  Tensor features;  // N×C, pre-reversal encoder features X_i
  std::vector<DomainLabel> labels;
  double lambda = 1.0;
  DomainWeights weights;
  AlignMode mode = AlignMode::Cgrl;
};

/// -(1/N) Σ [w_main·y_i·log D(X'_i) + w_aux·(1-y_i)·log(1-D(X'_i))], with
/// X' the reversal-layer output and probabilities clamped as in bce().
Tensor cgrl_loss(const AlignmentBatch& batch, const Discriminator& discriminator);

/// λ schedule: constant `lambda`, linearly ramped from 0 over the first
/// `warmup_frac` of training when warmup_frac > 0.
double lambda_at(double lambda, double warmup_frac, std::size_t step, std::size_t total_steps);

}  // namespace nf
