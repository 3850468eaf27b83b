#pragma once

#include <span>
#include <string>
#include <vector>

#include "nucleiforge/nn.hpp"

namespace nf {

inline constexpr std::size_t kSliceTokens = 16;
inline constexpr std::size_t kEnsembleFactor = 4;

enum class DecoderMode { Base, Hr };

DecoderMode parse_decoder_mode(const std::string& s);
std::string to_string(DecoderMode mode);

struct DecoderConfig {
  DecoderMode mode = DecoderMode::Hr;
  std::size_t layers = 2;
  std::size_t embed_dim = 32;
  std::size_t heads = 2;
  std::size_t prompt_tokens = 2;
  /// Start the slice tokens and slice MLP from the base output token and
  /// hypernetwork, with the encoder branch zeroed.
  bool hr_warm_start = true;

  /// Channel width C' of F_mask and of the slice features.
  std::size_t mask_channels() const { return embed_dim / 4; }
  void validate() const;
};

/// Splits C×H×W into 16 slices of C×(H/4)×(W/4); slice k holds, at (y, x), the
/// value at (4y + k/4, 4x + k%4).
std::vector<Tensor> feature_unensemble(const Tensor& features);

/// Reassembles 16 single-channel g'×g' slices into one 1×4g'×4g' map.
/// Exact inverse of feature_unensemble for single-channel input.
Tensor pixel_ensemble(std::span<const Tensor> slices);

/// S_k(y, x) = Σ_c token_vectors[k, c] · slices[k][c, y, x].
std::vector<Tensor> produce_slices(const Tensor& token_vectors, std::span<const Tensor> slices);

/// SAM-style two-way transformer layer (post-norm).
struct TwoWayLayer {
  AttentionLayer self_attn;
  LayerNorm norm1;
  AttentionLayer token_to_image;
  LayerNorm norm2;
  Mlp mlp;
  LayerNorm norm3;
  AttentionLayer image_to_token;
  LayerNorm norm4;
};

struct TwoWayResult {
  Tensor tokens;  // Nt×Dd
  Tensor image;   // (g²)×Dd
};

struct BaseDecodeResult {
  Tensor tokens;          // output + prompt tokens after the transformer
  Tensor image_features;  // C'-independent transformer image stream, (g²)×Dd
  Tensor f_mask;          // C'×4g×4g
  Tensor logits;          // 1×4g×4g mask from the frozen hypernetwork
};

/// Intermediates of one high-resolution decode, kept for inspection.
struct DecoderState {
  Tensor f_encoder;
  Tensor f_mask;
  Tensor slice_tokens;  // T'_slice, 16×Dd
  std::vector<Tensor> f_slice;
  std::vector<Tensor> s_slice;
  Tensor output;
};

/// Frozen base mask decoder plus the high-resolution extension (slice tokens,
/// encoder-feature upsampler and slice MLP), all in one parameter namespace.
class MaskDecoder {
 public:
  MaskDecoder(ParamStore& store, const DecoderConfig& config, std::size_t encoder_dim,
              std::size_t grid, Rng& rng, bool freeze_base);

  /// Dense prompt from the coarse probability map 1×4g×4g -> Dd×g×g.
  Tensor embed_prompt(const Tensor& coarse) const;

  /// F_encoder (C×g×g) and dense prompt (Dd×g×g) through the frozen decoder.
  BaseDecodeResult base_decode(const Tensor& f_encoder, const Tensor& prompt) const;

  /// Runs the slice tokens together with the original token set through the
  /// frozen two-way transformer and returns their updated rows (16×Dd).
  Tensor slice_token_attend(const Tensor& slice_tokens, const Tensor& image_src) const;

  /// Logits at native×native. Uses the base mask in Base mode and the slice
  /// pipeline in Hr mode.
  Tensor forward(const Tensor& f_encoder, const Tensor& prompt, std::size_t native,
                 DecoderState* state = nullptr) const;

  /// High-resolution pipeline regardless of mode.
  Tensor hr_forward(const Tensor& f_encoder, const Tensor& prompt, std::size_t native,
                    DecoderState* state = nullptr) const;

  const DecoderConfig& config() const { return config_; }
  std::size_t grid() const { return grid_; }
  /// Side of the base decoder output (4g) and of the slice output (16g).
  std::size_t base_resolution() const { return 4 * grid_; }
  std::size_t hr_resolution() const { return 16 * grid_; }

  const Parameter& slice_tokens() const { return *slice_tokens_; }
  /// Attention probabilities of the slice-token rows in the first self-attention.
  Tensor slice_self_attention_probs(const Tensor& slice_tokens) const;

 private:
  TwoWayResult two_way(const Tensor& tokens, const Tensor& image_src) const;
  Tensor image_source(const Tensor& f_encoder, const Tensor& prompt) const;
  Tensor to_native(const Tensor& logits, std::size_t native) const;

  DecoderConfig config_;
  std::size_t encoder_dim_;
  std::size_t grid_;

  // Frozen base.
  Conv2d neck_;
  Conv2d prompt_proj_;
  Parameter* pos_embed_;
  Parameter* output_token_;
  Parameter* prompt_tokens_;
  std::vector<TwoWayLayer> layers_;
  AttentionLayer final_attn_;
  LayerNorm final_norm_;
  ConvTranspose2x2 upscale1_;
  ConvTranspose2x2 upscale2_;
  Mlp hypernet_;

  // Trainable high-resolution extension.
  Parameter* slice_tokens_;
  ConvTranspose2x2 encoder_up1_;
  ConvTranspose2x2 encoder_up2_;
  Mlp slice_mlp_;
};

}  // namespace nf
