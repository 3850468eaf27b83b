#include "nucleiforge/hr_decoder.hpp"

#include <stdexcept>

namespace nf {

DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "base") return DecoderMode::Base;
  if (s == "hr") return DecoderMode::Hr;
  throw std::invalid_argument("decoder.mode must be base or hr, got '" + s + "'");
}

std::string to_string(DecoderMode mode) { return mode == DecoderMode::Base ? "base" : "hr"; }

void DecoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("decoder config: " + msg); };
  if (layers == 0) fail("layers must be >= 1");
  if (embed_dim < 4 || embed_dim % 4) fail("embed_dim must be a positive multiple of 4");
  if (heads == 0 || embed_dim % heads) fail("embed_dim must be divisible by heads");
}

std::vector<Tensor> feature_unensemble(const Tensor& features) {
  if (features.rank() != 3) throw ShapeError("feature_unensemble: expected C×H×W, got " + shape_str(features.shape()));
  const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
  if (h % kEnsembleFactor || w % kEnsembleFactor) {
    throw AttrError("feature_unensemble: spatial dims of " + shape_str(features.shape()) +
                    " are not divisible by 4");
  }
  const std::size_t sh = h / kEnsembleFactor, sw = w / kEnsembleFactor;
  // space_to_depth puts phase k of channel c at c·16 + k; regroup phase-major.
  Tensor phases = reshape(space_to_depth(features, kEnsembleFactor), {c, kSliceTokens, sh * sw});
  const std::size_t order[] = {1, 0, 2};
  phases = permute(phases, order);
  std::vector<Tensor> slices;
  slices.reserve(kSliceTokens);
  for (std::size_t k = 0; k < kSliceTokens; ++k) slices.push_back(reshape(slice(phases, 0, k, k + 1), {c, sh, sw}));
  return slices;
}

Tensor pixel_ensemble(std::span<const Tensor> slices) {
  if (slices.size() != kSliceTokens) {
    throw ShapeError("pixel_ensemble: expected 16 slices, got " + std::to_string(slices.size()));
  }
  const Shape& ref = slices[0].shape();
  if (ref.size() != 3 || ref[0] != 1) throw ShapeError("pixel_ensemble: slices must be 1×h×w, got " + shape_str(ref));
  for (const auto& s : slices)
    if (s.shape() != ref) throw ShapeError("pixel_ensemble: unequal slice shapes " + shape_str(ref) + " and " + shape_str(s.shape()));
  return depth_to_space(concat(slices, 0), kEnsembleFactor);
}

std::vector<Tensor> produce_slices(const Tensor& token_vectors, std::span<const Tensor> slices) {
  if (token_vectors.rank() != 2 || token_vectors.dim(0) != slices.size()) {
    throw ShapeError("produce_slices: " + shape_str(token_vectors.shape()) + " token vectors for " +
                     std::to_string(slices.size()) + " slices");
  }
  std::vector<Tensor> out;
  out.reserve(slices.size());
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const Tensor& f = slices[k];
    if (f.rank() != 3 || f.dim(0) != token_vectors.dim(1)) {
      throw ShapeError("produce_slices: token width " + std::to_string(token_vectors.dim(1)) +
                       " does not match slice " + shape_str(f.shape()));
    }
    const std::size_t h = f.dim(1), w = f.dim(2);
    Tensor row = slice(token_vectors, 0, k, k + 1);
    out.push_back(reshape(matmul(row, reshape(f, {f.dim(0), h * w})), {1, h, w}));
  }
  return out;
}

MaskDecoder::MaskDecoder(ParamStore& store, const DecoderConfig& config, std::size_t encoder_dim,
                         std::size_t grid, Rng& rng, bool freeze_base)
    : config_(config), encoder_dim_(encoder_dim), grid_(grid) {
  config_.validate();
  const bool base = !freeze_base;
  const std::size_t d = config_.embed_dim;
  const std::size_t cm = config_.mask_channels();
  neck_ = Conv2d::create(store, "decoder.neck", encoder_dim, d, 1, base, rng);
  prompt_proj_ = Conv2d::create(store, "decoder.prompt_proj", kEnsembleFactor * kEnsembleFactor, d, 1, base, rng);
  pos_embed_ = store.add("decoder.pos_embed", uniform_init({grid * grid, d}, 0.5, rng), base);
  output_token_ = store.add("decoder.output_token", uniform_init({1, d}, 1.0, rng), base);
  prompt_tokens_ = store.add("decoder.prompt_tokens", uniform_init({config_.prompt_tokens, d}, 1.0, rng), base);
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string n = "decoder.layer" + std::to_string(i);
    TwoWayLayer l;
    l.self_attn = AttentionLayer::create(store, n + ".self_attn", d, config_.heads, base, rng);
    l.norm1 = LayerNorm::create(store, n + ".norm1", d, base);
    l.token_to_image = AttentionLayer::create(store, n + ".token_to_image", d, config_.heads, base, rng);
    l.norm2 = LayerNorm::create(store, n + ".norm2", d, base);
    l.mlp = Mlp::create(store, n + ".mlp", {d, 2 * d, d}, base, rng);
    l.norm3 = LayerNorm::create(store, n + ".norm3", d, base);
    l.image_to_token = AttentionLayer::create(store, n + ".image_to_token", d, config_.heads, base, rng);
    l.norm4 = LayerNorm::create(store, n + ".norm4", d, base);
    layers_.push_back(l);
  }
  final_attn_ = AttentionLayer::create(store, "decoder.final_attn", d, config_.heads, base, rng);
  final_norm_ = LayerNorm::create(store, "decoder.final_norm", d, base);
  upscale1_ = ConvTranspose2x2::create(store, "decoder.upscale1", d, d / 2, base, rng);
  upscale2_ = ConvTranspose2x2::create(store, "decoder.upscale2", d / 2, cm, base, rng);
  hypernet_ = Mlp::create(store, "decoder.hypernet", {d, d, d, cm}, base, rng);

  slice_tokens_ = store.add("hr.slice_tokens", uniform_init({kSliceTokens, d}, 1.0, rng), true);
  encoder_up1_ = ConvTranspose2x2::create(store, "hr.encoder_up1", encoder_dim, d / 2, true, rng);
  encoder_up2_ = ConvTranspose2x2::create(store, "hr.encoder_up2", d / 2, cm, true, rng);
  slice_mlp_ = Mlp::create(store, "hr.slice_mlp", {d, d, d, cm}, true, rng);
}

Tensor MaskDecoder::embed_prompt(const Tensor& coarse) const {
  const std::size_t r = base_resolution();
  if (coarse.rank() != 3 || coarse.dim(0) != 1 || coarse.dim(1) != r || coarse.dim(2) != r) {
    throw ShapeError("embed_prompt: expected [1, " + std::to_string(r) + ", " + std::to_string(r) +
                     "], got " + shape_str(coarse.shape()));
  }
  return prompt_proj_(space_to_depth(coarse, kEnsembleFactor));
}

Tensor MaskDecoder::image_source(const Tensor& f_encoder, const Tensor& prompt) const {
  if (f_encoder.rank() != 3 || f_encoder.dim(0) != encoder_dim_ || f_encoder.dim(1) != grid_ ||
      f_encoder.dim(2) != grid_) {
    throw ShapeError("decoder: expected F_encoder [" + std::to_string(encoder_dim_) + ", " +
                     std::to_string(grid_) + ", " + std::to_string(grid_) + "], got " +
                     shape_str(f_encoder.shape()));
  }
  Tensor src = neck_(f_encoder);
  if (prompt.shape() != src.shape()) throw ShapeError("decoder: prompt " + shape_str(prompt.shape()) + " vs image " + shape_str(src.shape()));
  return to_tokens(add(src, prompt));
}

TwoWayResult MaskDecoder::two_way(const Tensor& tokens, const Tensor& image_src) const {
  const Tensor& query_pe = tokens;
  const Tensor& key_pe = pos_embed_->value;
  Tensor queries = tokens;
  Tensor keys = image_src;
  for (const auto& l : layers_) {
    Tensor q = add(queries, query_pe);
    queries = l.norm1(add(queries, l.self_attn(q, q, queries)));
    q = add(queries, query_pe);
    Tensor k = add(keys, key_pe);
    queries = l.norm2(add(queries, l.token_to_image(q, k, keys)));
    queries = l.norm3(add(queries, l.mlp(queries)));
    q = add(queries, query_pe);
    k = add(keys, key_pe);
    keys = l.norm4(add(keys, l.image_to_token(k, q, queries)));
  }
  Tensor q = add(queries, query_pe);
  Tensor k = add(keys, key_pe);
  queries = final_norm_(add(queries, final_attn_(q, k, keys)));
  return {queries, keys};
}

BaseDecodeResult MaskDecoder::base_decode(const Tensor& f_encoder, const Tensor& prompt) const {
  const Tensor src = image_source(f_encoder, prompt);
  const Tensor parts[] = {output_token_->value, prompt_tokens_->value};
  auto tw = two_way(concat(parts, 0), src);
  Tensor f_mask = relu(upscale2_(relu(upscale1_(from_tokens(tw.image, grid_, grid_)))));
  const std::size_t cm = config_.mask_channels(), r = base_resolution();
  Tensor h = hypernet_(slice(tw.tokens, 0, 0, 1));
  Tensor logits = reshape(matmul(h, reshape(f_mask, {cm, r * r})), {1, r, r});
  return {tw.tokens, tw.image, f_mask, logits};
}

Tensor MaskDecoder::slice_token_attend(const Tensor& slice_tokens, const Tensor& image_src) const {
  const std::size_t d = config_.embed_dim;
  if (slice_tokens.rank() != 2 || slice_tokens.dim(0) != kSliceTokens || slice_tokens.dim(1) != d) {
    throw ShapeError("slice_token_attend: expected [16, " + std::to_string(d) + "], got " +
                     shape_str(slice_tokens.shape()));
  }
  if (image_src.rank() != 2 || image_src.dim(1) != d) {
    throw ShapeError("slice_token_attend: image tokens " + shape_str(image_src.shape()) +
                     " do not have width " + std::to_string(d));
  }
  const Tensor parts[] = {slice_tokens, output_token_->value, prompt_tokens_->value};
  auto tw = two_way(concat(parts, 0), image_src);
  return slice(tw.tokens, 0, 0, kSliceTokens);
}

Tensor MaskDecoder::slice_self_attention_probs(const Tensor& slice_tokens) const {
  const Tensor parts[] = {slice_tokens, output_token_->value, prompt_tokens_->value};
  Tensor tokens = concat(parts, 0);
  Tensor q = add(tokens, tokens);
  const auto& attn = layers_.front().self_attn;
  return attention_probs(attn.q(q), attn.k(q), attn.heads);
}

Tensor MaskDecoder::to_native(const Tensor& logits, std::size_t native) const {
  if (native == 0) throw AttrError("decoder: native size must be positive");
  if (logits.dim(1) == native && logits.dim(2) == native) return logits;
  return resize_bilinear(logits, native, native);
}

Tensor MaskDecoder::hr_forward(const Tensor& f_encoder, const Tensor& prompt, std::size_t native,
                               DecoderState* state) const {
  if (native > hr_resolution()) {
    throw AttrError("hr_forward: native size " + std::to_string(native) + " exceeds decoder output " +
                    std::to_string(hr_resolution()));
  }
  const Tensor src = image_source(f_encoder, prompt);
  const Tensor parts[] = {output_token_->value, prompt_tokens_->value};
  auto tw = two_way(concat(parts, 0), src);
  Tensor f_mask = relu(upscale2_(relu(upscale1_(from_tokens(tw.image, grid_, grid_)))));

  Tensor updated = slice_token_attend(slice_tokens_->value, src);
  Tensor encoder_up = encoder_up2_(relu(encoder_up1_(f_encoder)));
  Tensor f_up = upsample_bilinear(add(encoder_up, f_mask), kEnsembleFactor);
  auto f_slice = feature_unensemble(f_up);
  auto s_slice = produce_slices(slice_mlp_(updated), f_slice);
  Tensor out = to_native(pixel_ensemble(s_slice), native);
  if (state) {
    *state = DecoderState{f_encoder, f_mask, updated, std::move(f_slice), std::move(s_slice), out};
  }
  return out;
}

Tensor MaskDecoder::forward(const Tensor& f_encoder, const Tensor& prompt, std::size_t native,
                            DecoderState* state) const {
  if (config_.mode == DecoderMode::Hr) return hr_forward(f_encoder, prompt, native, state);
  auto base = base_decode(f_encoder, prompt);
  Tensor out = to_native(base.logits, native);
  if (state) *state = DecoderState{f_encoder, base.f_mask, {}, {}, {}, out};
  return out;
}

}  // namespace nf
