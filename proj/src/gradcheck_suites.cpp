#include "nucleiforge/gradcheck_suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "nucleiforge/domain_align.hpp"
#include "nucleiforge/hr_decoder.hpp"
#include "nucleiforge/train.hpp"

namespace nf {

namespace {

Tensor random_uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = u(rng);
  return t;
}

Tensor random_mask(const Shape& shape, Rng& rng) {
  std::bernoulli_distribution b(0.4);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

std::vector<DomainLabel> random_labels(std::size_t n, Rng& rng) {
  std::vector<DomainLabel> labels(n);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < n; ++i) {
    const bool primary = i == 0 ? true : i == 1 ? false : coin(rng);
    labels[i] = {primary ? 0 : 1 + static_cast<int>(i % 3), primary};
  }
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

/// Worst relative error per parameter between tape gradients of `analytic`
/// and central differences of `numeric`, on up to `coords` coordinates each.
std::map<std::string, double> parameter_fd(const std::vector<Parameter*>& params, const std::function<Tensor()>& analytic,
                                           const std::function<double()>& numeric, std::size_t coords, Rng& rng,
                                           double step = 1e-5) {
  Tape tape;
  GradStore grads;
  {
    TapeScope scope(tape);
    grads = tape.backward(analytic());
  }
  std::map<std::string, double> worst;
  for (auto* p : params) {
    const auto g = grads.grad(p->value);
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    if (coords && idx.size() > coords) idx.resize(coords);
    double w = 0.0;
    for (auto i : idx) {
      const double original = p->value[i];
      p->value.mutable_data()[i] = original + step;
      const double up = numeric();
      p->value.mutable_data()[i] = original - step;
      const double down = numeric();
      p->value.mutable_data()[i] = original;
      const double a = g ? (*g)[i] : 0.0;
      w = std::max(w, grad_rel_error(a, (up - down) / (2.0 * step)));
    }
    worst[p->name] = w;
  }
  return worst;
}

std::vector<SuiteEntry> primitive_suite(std::uint64_t seed) {
  std::vector<SuiteEntry> out;
  for (const auto& c : primitive_cases()) {
    double worst = 0.0;
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
      Rng rng(seed * 1000 + 100 + trial);
      std::vector<Tensor> point;
      for (const auto& s : c.shapes) point.push_back(random_uniform(s, rng, c.lo, c.hi));
      worst = std::max(worst, grad_check(c.program, point).max_rel_error);
    }
    out.push_back({c.name, worst, 1e-5});
  }
  return out;
}

/// Compares the gradient reaching the features through `layer` with the
/// gradient through an identity, scaled by the expected per-row factor.
double reversal_rule_error(bool conditional, std::uint64_t seed) {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(seed * 7919 + trial);
    const std::size_t n = 2 + trial % 7, c = 1 + trial % 5;
    const double lambda = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    const auto labels = random_labels(n, rng);
    const Tensor x = random_uniform({n, c}, rng).set_requires_grad(true);
    const Tensor weights = random_uniform({n, c}, rng);
    Tape tape;
    GradStore grads;
    {
      TapeScope scope(tape);
      const Tensor y = conditional ? cgrl(x, labels, lambda) : grl(x, lambda);
      grads = tape.backward(sum(mul(y, weights)));
    }
    const Tensor g = *grads.grad(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double got = g[i * c + j];
        if (conditional && labels[i].is_primary) {
          if (got != 0.0) return std::numeric_limits<double>::infinity();
          continue;
        }
        const double want = -lambda * weights[i * c + j];
        worst = std::max(worst, std::abs(got - want) / std::max(1e-300, std::abs(want)));
      }
  }
  return worst;
}

double cgrl_loss_value_error(std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed + 3);
  const auto disc = Discriminator::create(store, "d", 4, 8, rng);
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 6;
    const auto labels = random_labels(n, rng);
    const Tensor x = random_uniform({n, 4}, rng);
    std::map<int, std::size_t> sizes{{0, 1 + trial % 5}, {1, 2 + trial % 3}};
    const DomainWeights w = domain_weights(sizes, 0);
    AlignmentBatch batch{x, labels, 1.0, w, AlignMode::Cgrl};
    NoGradScope no_grad;
    const double got = cgrl_loss(batch, disc).item();
    const Tensor d = disc(x);
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = std::clamp(d[i], kProbClamp, 1.0 - kProbClamp);
      want -= labels[i].is_primary ? w.w_main * std::log(p) : w.w_aux * std::log(1.0 - p);
    }
    want /= static_cast<double>(n);
    worst = std::max(worst, std::abs(got - want));
  }
  return worst;
}

double discriminator_fd_error(std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed + 11);
  const auto disc = Discriminator::create(store, "d", 5, 6, rng);
  const auto labels = random_labels(6, rng);
  const Tensor x = random_uniform({6, 5}, rng);
  AlignmentBatch batch{x, labels, 0.8, {1.5, 0.75}, AlignMode::Cgrl};
  auto value = [&]() { return cgrl_loss(batch, disc); };
  auto numeric = [&]() {
    NoGradScope no_grad;
    return value().item();
  };
  double worst = 0.0;
  for (const auto& [name, err] : parameter_fd(store.trainable(), value, numeric, 0, rng)) worst = std::max(worst, err);
  return worst;
}

std::vector<SuiteEntry> cgrl_suite(std::uint64_t seed) {
  return {
      {"cgrl_backward_rule", reversal_rule_error(true, seed), 1e-10},
      {"grl_backward_rule", reversal_rule_error(false, seed), 1e-10},
      {"cgrl_loss_value", cgrl_loss_value_error(seed), 1e-12},
      {"discriminator", discriminator_fd_error(seed), 1e-5},
  };
}

std::vector<SuiteEntry> decoder_suite(std::uint64_t seed) {
  const ModelConfig cfg = toy_model_config();
  const SegmentationModel model(cfg, seed + 5);
  const auto& dec = model.decoder();
  const std::size_t g = dec.grid(), d = cfg.encoder.embed_dim, dd = cfg.decoder.embed_dim;
  const std::size_t native = cfg.encoder.image_size;

  std::vector<GradCheckCase> cases = {
      {"feature_unensemble", {{2, 8, 8}},
       [](auto& in) {
         std::vector<Tensor> parts;
         const auto slices = feature_unensemble(in[0]);
         for (std::size_t k = 0; k < slices.size(); ++k) parts.push_back(reshape(weighted_probe(slices[k], k), {1}));
         return sum(concat(parts, 0));
       }},
      {"pixel_ensemble", std::vector<Shape>(kSliceTokens, Shape{1, 2, 2}),
       [](auto& in) { return weighted_probe(pixel_ensemble(in), 31); }},
      {"produce_slices", [] {
         std::vector<Shape> s{{kSliceTokens, 3}};
         for (std::size_t k = 0; k < kSliceTokens; ++k) s.push_back({3, 2, 2});
         return s;
       }(),
       [](auto& in) {
         std::vector<Tensor> slices(in.begin() + 1, in.end());
         const auto out = produce_slices(in[0], slices);
         std::vector<Tensor> parts;
         for (std::size_t k = 0; k < out.size(); ++k) parts.push_back(reshape(weighted_probe(out[k], 40 + k), {1}));
         return sum(concat(parts, 0));
       }},
      {"base_decode", {{d, g, g}, {dd, g, g}},
       [&dec](auto& in) { return weighted_probe(dec.base_decode(in[0], in[1]).logits, 51); }},
      {"slice_token_attend", {{kSliceTokens, dd}, {g * g, dd}},
       [&dec](auto& in) { return weighted_probe(dec.slice_token_attend(in[0], in[1]), 52); }},
      {"hr_forward", {{d, g, g}, {dd, g, g}},
       [&dec, native](auto& in) { return weighted_probe(dec.hr_forward(in[0], in[1], native), 53); }},
      {"hr_forward_upsampled", {{d, g, g}, {dd, g, g}},
       [&dec](auto& in) { return weighted_probe(dec.hr_forward(in[0], in[1], dec.hr_resolution()), 54); }},
  };
  std::vector<SuiteEntry> out;
  for (const auto& c : cases) {
    Rng rng(seed * 31 + 9);
    std::vector<Tensor> point;
    for (const auto& s : c.shapes) point.push_back(random_uniform(s, rng, c.lo, c.hi));
    GradCheckOptions opts;
    opts.max_coords = 24;
    opts.seed = seed;
    out.push_back({c.name, grad_check(c.program, point, opts).max_rel_error, 1e-5});
  }
  return out;
}

}  // namespace

Tensor weighted_probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_uniform(y.shape(), rng)));
}

std::vector<GradCheckCase> primitive_cases() {
  return {
      {"add", {{3, 4}, {4}}, [](auto& in) { return weighted_probe(add(in[0], in[1]), 1); }},
      {"sub", {{3, 1}, {3, 4}}, [](auto& in) { return weighted_probe(sub(in[0], in[1]), 2); }},
      {"mul", {{2, 3, 4}, {3, 1}}, [](auto& in) { return weighted_probe(mul(in[0], in[1]), 3); }},
      {"scale", {{5}}, [](auto& in) { return weighted_probe(scale(in[0], -2.5), 4); }},
      {"matmul", {{3, 5}, {5, 2}}, [](auto& in) { return weighted_probe(matmul(in[0], in[1]), 5); }},
      {"conv2d_same", {{2, 5, 5}, {3, 2, 3, 3}, {3}},
       [](auto& in) { return weighted_probe(conv2d(in[0], in[1], in[2], Padding::Same), 6); }},
      {"conv2d_valid", {{2, 5, 4}, {3, 2, 3, 3}},
       [](auto& in) { return weighted_probe(conv2d(in[0], in[1], Tensor(), Padding::Valid), 7); }},
      {"relu", {{10}}, [](auto& in) { return weighted_probe(relu(in[0]), 8); }},
      {"sigmoid", {{10}}, [](auto& in) { return weighted_probe(sigmoid(scale(in[0], 3.0)), 9); }},
      {"softmax_axis0", {{4, 3}}, [](auto& in) { return weighted_probe(softmax(in[0], 0), 10); }},
      {"softmax_axis1", {{2, 3, 4}}, [](auto& in) { return weighted_probe(softmax(in[0], 1), 11); }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto& in) { return weighted_probe(layer_norm(in[0], in[1], in[2]), 12); }},
      {"transpose", {{3, 4}}, [](auto& in) { return weighted_probe(transpose(in[0]), 13); }},
      {"permute", {{2, 3, 4}},
       [](auto& in) {
         const std::size_t order[] = {2, 0, 1};
         return weighted_probe(permute(in[0], order), 14);
       }},
      {"reshape", {{3, 4}}, [](auto& in) { return weighted_probe(reshape(in[0], {2, 6}), 15); }},
      {"concat", {{2, 3}, {2, 2}},
       [](auto& in) {
         std::vector<Tensor> parts{in[0], in[1]};
         return weighted_probe(concat(parts, 1), 16);
       }},
      {"slice", {{4, 5}}, [](auto& in) { return weighted_probe(slice(in[0], 1, 1, 4), 17); }},
      {"sum", {{3, 4}}, [](auto& in) { return scale(sum(in[0]), -1.5); }},
      {"sum_axis", {{3, 4}}, [](auto& in) { return weighted_probe(sum(in[0], 0), 18); }},
      {"mean_axis", {{3, 4}}, [](auto& in) { return weighted_probe(mean(in[0], 1), 19); }},
      {"mean", {{3, 4}}, [](auto& in) { return scale(mean(in[0]), 3.0); }},
      {"upsample_nearest", {{2, 3, 3}}, [](auto& in) { return weighted_probe(upsample_nearest(in[0], 2), 20); }},
      {"upsample_bilinear", {{2, 3, 3}}, [](auto& in) { return weighted_probe(upsample_bilinear(in[0], 4), 21); }},
      {"resize_bilinear", {{1, 8, 8}}, [](auto& in) { return weighted_probe(resize_bilinear(in[0], 3, 5), 22); }},
      {"space_to_depth", {{2, 4, 4}}, [](auto& in) { return weighted_probe(space_to_depth(in[0], 2), 23); }},
      {"depth_to_space", {{8, 2, 3}}, [](auto& in) { return weighted_probe(depth_to_space(in[0], 2), 24); }},
      {"attention", {{3, 8}, {5, 8}, {5, 8}},
       [](auto& in) { return weighted_probe(attention(in[0], in[1], in[2], 4), 25); }},
      {"bce", {{6}, {6}}, [](auto& in) { return bce(in[0], in[1]); }, 0.05, 0.95},
      {"bce_weighted", {{6}, {6}, {6}}, [](auto& in) { return bce(in[0], in[1], in[2]); }, 0.05, 0.95},
      {"soft_dice", {{6}, {6}}, [](auto& in) { return soft_dice(in[0], in[1]); }, 0.05, 0.95},
  };
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.encoder.image_size = 16;
  c.encoder.patch_size = 4;
  c.encoder.layers = 1;
  c.encoder.embed_dim = 8;
  c.encoder.adapter_hidden = 4;
  c.encoder.heads = 2;
  c.decoder.layers = 1;
  c.decoder.embed_dim = 8;
  c.decoder.heads = 2;
  c.decoder.prompt_tokens = 1;
  c.spgen_hidden = 4;
  c.discriminator_hidden = 6;
  return c;
}

std::vector<SuiteEntry> full_model_gradcheck(std::uint64_t seed, std::size_t coords_per_param) {
  const ModelConfig cfg = toy_model_config();
  SegmentationModel model(cfg, seed + 17);
  Rng rng(seed + 23);
  // Move every trainable tensor off its initialization (adapter up-projections
  // start at zero, which would hide the adapter down-projections).
  for (auto* p : model.params().trainable())
    for (auto& v : p->value.mutable_data()) v += std::uniform_real_distribution<double>(-0.2, 0.2)(rng);

  const std::size_t s = cfg.encoder.image_size;
  std::vector<DomainSample> samples(3);
  const DomainLabel labels[] = {{0, true}, {1, false}, {2, false}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].image = random_uniform({3, s, s}, rng, 0.0, 1.0);
    samples[i].mask = random_mask({1, s, s}, rng);
    samples[i].label = labels[i];
  }
  std::vector<const DomainSample*> batch;
  for (const auto& x : samples) batch.push_back(&x);

  ExperimentConfig config;
  config.model = cfg;
  config.align.mode = AlignMode::Cgrl;
  config.train.alpha = 0.9;
  config.train.beta = 0.6;
  const double lambda = 0.7;
  const DomainWeights weights = domain_weights({{0, 1}, {1, 1}, {2, 1}}, 0);

  auto pooled_features = [&]() {
    std::vector<Tensor> rows;
    for (const auto* x : batch) rows.push_back(model.forward(x->image).pooled);
    return concat(rows, 0);
  };
  Tensor x0;
  {
    NoGradScope no_grad;
    x0 = pooled_features();
  }
  auto analytic = [&]() { return batch_losses(model, batch, config, weights, lambda).total; };
  auto numeric = [&]() {
    NoGradScope no_grad;
    ExperimentConfig seg_only = config;
    seg_only.train.alpha = 0.0;
    const double segmentation = batch_losses(model, batch, seg_only, weights, lambda).total.item();
    const Tensor x = pooled_features();
    Tensor surrogate(x.shape());
    auto out = surrogate.mutable_data();
    const std::size_t c = x.dim(1);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const double r = batch[i]->label.is_primary ? 0.0 : -lambda;
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x0[i * c + j] + r * (x[i * c + j] - x0[i * c + j]);
    }
    Tensor target({x.dim(0), 1}), w({x.dim(0), 1});
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      target.mutable_data()[i] = batch[i]->label.is_primary ? 1.0 : 0.0;
      w.mutable_data()[i] = batch[i]->label.is_primary ? weights.w_main : weights.w_aux;
    }
    const double adversarial = bce(model.discriminator()(surrogate), target, w).item();
    return segmentation + config.train.alpha * adversarial;
  };
  std::vector<SuiteEntry> out;
  for (const auto& [name, err] : parameter_fd(model.params().trainable(), analytic, numeric, coords_per_param, rng))
    out.push_back({"full/" + name, err, 1e-4});
  return out;
}

std::vector<SuiteEntry> run_gradcheck_suite(const std::string& scope, std::uint64_t seed) {
  if (scope == "primitives") return primitive_suite(seed);
  if (scope == "cgrl") return cgrl_suite(seed);
  if (scope == "decoder") return decoder_suite(seed);
  if (scope == "full") return full_model_gradcheck(seed);
  throw std::invalid_argument("unknown gradcheck scope '" + scope + "' (expected primitives, cgrl, decoder or full)");
}

}  // namespace nf
