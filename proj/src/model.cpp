#include "nucleiforge/model.hpp"

#include <stdexcept>

namespace nf {

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (spgen_hidden == 0 || discriminator_hidden == 0) {
    throw std::invalid_argument("model config: spgen_hidden and discriminator_hidden must be positive");
  }
}

Tensor global_average_pool(const Tensor& chw) {
  const std::size_t c = chw.dim(0);
  return reshape(mean(reshape(chw, {c, chw.dim(1) * chw.dim(2)}), 1), {1, c});
}

SegmentationModel::SegmentationModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  encoder_ = std::make_unique<Encoder>(params_, config_.encoder, rng, config_.freeze_base);
  spgen_ = std::make_unique<SpGen>(params_, config_.encoder.embed_dim, config_.spgen_hidden, rng);
  decoder_ = std::make_unique<MaskDecoder>(params_, config_.decoder, config_.encoder.embed_dim,
                                           config_.encoder.grid(), rng, config_.freeze_base);
  discriminator_ = Discriminator::create(params_, "discriminator", config_.encoder.embed_dim,
                                         config_.discriminator_hidden, rng);
}

ForwardResult SegmentationModel::forward(const Tensor& image) const {
  ForwardResult r;
  r.features = (*encoder_)(image);
  r.pooled = global_average_pool(r.features);
  r.coarse = (*spgen_)(r.features);
  r.logits = decoder_->forward(r.features, decoder_->embed_prompt(r.coarse), config_.encoder.image_size);
  return r;
}

Tensor SegmentationModel::predict(const Tensor& image) const {
  NoGradScope no_grad;
  return sigmoid(forward(image).logits);
}

bool SegmentationModel::is_base_parameter(const std::string& name) const {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts("encoder.")) return name.find(".adapter.") == std::string::npos;
  return starts("decoder.");
}

void SegmentationModel::unfreeze_all() {
  for (auto* p : params_.all()) params_.set_trainable(p, true);
}

}  // namespace nf
