#include "nucleiforge/backbone.hpp"

#include <stdexcept>
#include <string>

namespace nf {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size) fail("image_size must be divisible by patch_size");
  if (grid() % 4) fail("feature grid (image_size / patch_size) must be divisible by 4");
  if (layers == 0) fail("layers must be >= 1");
  if (embed_dim == 0 || adapter_hidden == 0) fail("embed_dim and adapter_hidden must be positive");
  if (heads == 0 || embed_dim % heads) fail("embed_dim must be divisible by heads");
}

Tensor Adapter::operator()(const Tensor& x) const { return add(x, up(relu(down(x)))); }

Encoder::Encoder(ParamStore& store, const EncoderConfig& config, Rng& rng, bool freeze_base)
    : config_(config) {
  config_.validate();
  const bool base_trainable = !freeze_base;
  const std::size_t d = config_.embed_dim;
  const std::size_t patch_dim = 3 * config_.patch_size * config_.patch_size;
  const std::size_t tokens = config_.grid() * config_.grid();
  patch_embed_ = Linear::create(store, "encoder.patch_embed", patch_dim, d, base_trainable, rng);
  pos_embed_ = store.add("encoder.pos_embed", uniform_init({tokens, d}, 0.1, rng), base_trainable);
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string name = "encoder.block" + std::to_string(i);
    EncoderBlock b;
    b.norm1 = LayerNorm::create(store, name + ".norm1", d, base_trainable);
    b.attn = AttentionLayer::create(store, name + ".attn", d, config_.heads, base_trainable, rng);
    b.norm2 = LayerNorm::create(store, name + ".norm2", d, base_trainable);
    b.mlp = Mlp::create(store, name + ".mlp", {d, 2 * d, d}, base_trainable, rng);
    b.adapter.down = Linear::create(store, name + ".adapter.down", d, config_.adapter_hidden, true, rng);
    b.adapter.up = Linear::create(store, name + ".adapter.up", config_.adapter_hidden, d, true, rng, 0.0);
    blocks_.push_back(b);
  }
  final_norm_ = LayerNorm::create(store, "encoder.final_norm", d, base_trainable);
}

Tensor Encoder::encode(const Tensor& image, bool use_adapters) const {
  const std::size_t s = config_.image_size;
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != s || image.dim(2) != s) {
    throw ShapeError("encode: expected image [3, " + std::to_string(s) + ", " + std::to_string(s) +
                     "], got " + shape_str(image.shape()));
  }
  const std::size_t g = config_.grid();
  // Patches become channels: (3·p²)×g×g -> tokens (g²)×(3·p²).
  Tensor x = to_tokens(space_to_depth(image, config_.patch_size));
  x = add(patch_embed_(x), pos_embed_->value);
  for (const auto& b : blocks_) {
    Tensor h = b.norm1(x);
    x = add(x, b.attn(h, h, h));
    x = add(x, b.mlp(b.norm2(x)));
    if (use_adapters) x = b.adapter(x);
  }
  return from_tokens(final_norm_(x), g, g);
}

SpGen::SpGen(ParamStore& store, std::size_t in_channels, std::size_t hidden, Rng& rng)
    : in_channels_(in_channels),
      conv1_(Conv2d::create(store, "spgen.conv1", in_channels, hidden, 3, true, rng)),
      conv2_(Conv2d::create(store, "spgen.conv2", hidden, hidden, 3, true, rng)),
      head_(Conv2d::create(store, "spgen.head", hidden, 1, 1, true, rng)) {}

Tensor SpGen::operator()(const Tensor& features) const {
  if (features.rank() != 3 || features.dim(0) != in_channels_) {
    throw ShapeError("spgen: expected " + std::to_string(in_channels_) + " channels, got " +
                     shape_str(features.shape()));
  }
  Tensor h = relu(conv1_(features));
  h = relu(conv2_(upsample_bilinear(h, 2)));
  return sigmoid(head_(upsample_bilinear(h, 2)));
}

}  // namespace nf
