#pragma once

#include <vector>

#include "nucleiforge/nn.hpp"

namespace nf {

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 4;
  std::size_t layers = 4;
  std::size_t embed_dim = 64;
  std::size_t adapter_hidden = 16;
  std::size_t heads = 4;

  std::size_t grid() const { return image_size / patch_size; }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

/// Bottleneck adapter with residual: x + up(relu(down(x))). `up` starts at
/// zero so a fresh adapter is the identity.
struct Adapter {
  Linear down;
  Linear up;
  Tensor operator()(const Tensor& x) const;
};

struct EncoderBlock {
  LayerNorm norm1;
  AttentionLayer attn;
  LayerNorm norm2;
  Mlp mlp;
  Adapter adapter;
};

/// Patch-embedding transformer standing in for the frozen image encoder, with
/// one trainable adapter after every block.
class Encoder {
 public:
  Encoder(ParamStore& store, const EncoderConfig& config, Rng& rng, bool freeze_base);

  /// image 3×S×S in [0,1] -> F_encoder of shape embed_dim×grid×grid.
  Tensor operator()(const Tensor& image) const { return encode(image, true); }
  Tensor encode(const Tensor& image, bool use_adapters) const;

  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  Linear patch_embed_;
  Parameter* pos_embed_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm final_norm_;
};

/// Automatic prompt generator: a small conv decoder producing a coarse
/// foreground-probability map at 4× the feature grid.
class SpGen {
 public:
  SpGen(ParamStore& store, std::size_t in_channels, std::size_t hidden, Rng& rng);

  /// F: C×g×g -> 1×4g×4g probabilities.
  Tensor operator()(const Tensor& features) const;

 private:
  std::size_t in_channels_;
  Conv2d conv1_;
  Conv2d conv2_;
  Conv2d head_;
};

}  // namespace nf
