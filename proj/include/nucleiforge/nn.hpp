#pragma once

#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nucleiforge/checkpoint.hpp"
#include "nucleiforge/ops.hpp"

namespace nf {

/// A named model tensor. `trainable` decides whether it joins the tape as a
/// leaf and whether the optimizer may touch it.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = false;
};

/// Registration-ordered parameter collection. Parameter addresses are stable.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter* add(const std::string& name, Tensor init, bool trainable);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();

  std::size_t count(bool trainable) const;
  std::size_t count() const;

  void set_trainable(Parameter* p, bool on);

  NamedTensors snapshot() const;
  NamedTensors snapshot(bool trainable) const;
  /// Replaces values from a checkpoint. Every stored parameter must be present
  /// with an identical shape; mismatches are reported together.
  void load(const NamedTensors& tensors);

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

using Rng = std::mt19937_64;

Tensor uniform_init(Shape shape, double bound, Rng& rng);
/// Glorot-uniform over fan_in + fan_out.
Tensor xavier_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// y = x·W + b for x of shape N×in.
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       bool trainable, Rng& rng, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight->value.dim(0); }
  std::size_t out_features() const { return weight->value.dim(1); }
};

struct Conv2d {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  Padding padding = Padding::Same;

  static Conv2d create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, bool trainable, Rng& rng, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
};

/// Kernel-2, stride-2 transposed convolution: a per-pixel linear map to 4·out
/// channels followed by depth_to_space(2).
struct ConvTranspose2x2 {
  Conv2d pointwise;

  static ConvTranspose2x2 create(ParamStore& store, const std::string& name, std::size_t in,
                                 std::size_t out, bool trainable, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t dim, bool trainable);
  Tensor operator()(const Tensor& x) const;
};

/// Linear stack with ReLU between layers (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParamStore& store, const std::string& name, std::vector<std::size_t> widths,
                    bool trainable, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Multi-head attention with input and output projections.
struct AttentionLayer {
  Linear q, k, v, out;
  std::size_t heads = 1;

  static AttentionLayer create(ParamStore& store, const std::string& name, std::size_t dim,
                               std::size_t heads, bool trainable, Rng& rng);
  Tensor operator()(const Tensor& queries, const Tensor& keys, const Tensor& values) const;
};

/// C×H×W -> (H·W)×C and back.
Tensor to_tokens(const Tensor& chw);
Tensor from_tokens(const Tensor& tokens, std::size_t h, std::size_t w);

}  // namespace nf
