#pragma once

#include <cstdint>
#include <memory>

#include "nucleiforge/backbone.hpp"
#include "nucleiforge/domain_align.hpp"
#include "nucleiforge/hr_decoder.hpp"

namespace nf {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  bool freeze_base = true;
  std::size_t spgen_hidden = 8;
  std::size_t discriminator_hidden = 128;

  void validate() const;
};

struct ForwardResult {
  Tensor features;  // F_encoder, C×g×g
  Tensor pooled;    // 1×C global average of F_encoder
  Tensor coarse;    // SPGen probabilities, 1×4g×4g
  Tensor logits;    // 1×S×S at the image's native size
};

/// Encoder + adapters, SPGen, frozen mask decoder with the high-resolution
/// extension, and the domain discriminator, sharing one ParamStore.
///
/// Base parameters (everything a pretrained segmenter would ship with) are
/// frozen when `freeze_base` is set; adapters, SPGen, the high-resolution
/// additions and the discriminator are always trainable.
class SegmentationModel {
 public:
  SegmentationModel(const ModelConfig& config, std::uint64_t seed);

  ForwardResult forward(const Tensor& image) const;
  /// Tape-free foreground probabilities at native resolution.
  Tensor predict(const Tensor& image) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Encoder& encoder() const { return *encoder_; }
  const SpGen& spgen() const { return *spgen_; }
  const MaskDecoder& decoder() const { return *decoder_; }
  const Discriminator& discriminator() const { return discriminator_; }
  const ModelConfig& config() const { return config_; }

  /// Names of the parameters that belong to the pretrained base.
  bool is_base_parameter(const std::string& name) const;
  /// Makes every parameter trainable (used while pretraining the base).
  void unfreeze_all();

 private:
  ModelConfig config_;
  ParamStore params_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<SpGen> spgen_;
  std::unique_ptr<MaskDecoder> decoder_;
  Discriminator discriminator_;
};

Tensor global_average_pool(const Tensor& chw);

}  // namespace nf
