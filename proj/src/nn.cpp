#include "nucleiforge/nn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace nf {

Parameter* ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("params: duplicate parameter " + name);
  init.set_requires_grad(trainable);
  params_.push_back(Parameter{name, std::move(init), trainable});
  index_.emplace(name, params_.size() - 1);
  return &params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<Parameter*> ParamStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p.trainable) out.push_back(&p);
  return out;
}

std::size_t ParamStore::count(bool trainable) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable == trainable) n += p.value.size();
  return n;
}

std::size_t ParamStore::count() const { return count(true) + count(false); }

void ParamStore::set_trainable(Parameter* p, bool on) {
  p->trainable = on;
  p->value.set_requires_grad(on);
}

NamedTensors ParamStore::snapshot() const {
  NamedTensors out;
  for (const auto& p : params_) out.emplace_back(p.name, p.value.detach());
  return out;
}

NamedTensors ParamStore::snapshot(bool trainable) const {
  NamedTensors out;
  for (const auto& p : params_)
    if (p.trainable == trainable) out.emplace_back(p.name, p.value.detach());
  return out;
}

void ParamStore::load(const NamedTensors& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name.emplace(name, &t);
  std::ostringstream problems;
  for (const auto& p : params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      problems << "\n  missing " << p.name << " " << shape_str(p.value.shape());
    } else if (it->second->shape() != p.value.shape()) {
      problems << "\n  " << p.name << ": checkpoint " << shape_str(it->second->shape()) << " vs model "
               << shape_str(p.value.shape());
    }
  }
  for (const auto& [name, t] : by_name)
    if (!index_.count(name)) problems << "\n  unexpected " << name << " " << shape_str(t->shape());
  if (!problems.str().empty()) {
    throw CheckpointError("checkpoint does not match the model:" + problems.str());
  }
  for (auto& p : params_) {
    p.value = by_name.at(p.name)->clone();
    p.value.set_requires_grad(p.trainable);
  }
}

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

Tensor xavier_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init(std::move(shape), bound, rng);
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      bool trainable, Rng& rng, double gain) {
  Tensor w = xavier_init({in, out}, in, out, rng);
  if (gain != 1.0) w = scale(w, gain);
  return {store.add(name + ".weight", std::move(w), trainable),
          store.add(name + ".bias", Tensor::zeros({out}), trainable)};
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight->value), bias->value); }

Conv2d Conv2d::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      std::size_t kernel, bool trainable, Rng& rng, double gain) {
  const std::size_t kk = kernel * kernel;
  Tensor w = xavier_init({out, in, kernel, kernel}, in * kk, out * kk, rng);
  if (gain != 1.0) w = scale(w, gain);
  Conv2d c;
  c.weight = store.add(name + ".weight", std::move(w), trainable);
  c.bias = store.add(name + ".bias", Tensor::zeros({out}), trainable);
  c.padding = Padding::Same;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight->value, bias->value, padding); }

ConvTranspose2x2 ConvTranspose2x2::create(ParamStore& store, const std::string& name, std::size_t in,
                                          std::size_t out, bool trainable, Rng& rng) {
  return {Conv2d::create(store, name, in, out * 4, 1, trainable, rng)};
}

Tensor ConvTranspose2x2::operator()(const Tensor& x) const { return depth_to_space(pointwise(x), 2); }

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t dim, bool trainable) {
  return {store.add(name + ".gamma", Tensor::ones({dim}), trainable),
          store.add(name + ".beta", Tensor::zeros({dim}), trainable)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma->value, beta->value); }

Mlp Mlp::create(ParamStore& store, const std::string& name, std::vector<std::size_t> widths,
                bool trainable, Rng& rng) {
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    m.layers.push_back(Linear::create(store, name + "." + std::to_string(i), widths[i], widths[i + 1],
                                      trainable, rng));
  }
  return m;
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

AttentionLayer AttentionLayer::create(ParamStore& store, const std::string& name, std::size_t dim,
                                      std::size_t heads, bool trainable, Rng& rng) {
  AttentionLayer a;
  a.q = Linear::create(store, name + ".q", dim, dim, trainable, rng);
  a.k = Linear::create(store, name + ".k", dim, dim, trainable, rng);
  a.v = Linear::create(store, name + ".v", dim, dim, trainable, rng);
  a.out = Linear::create(store, name + ".out", dim, dim, trainable, rng);
  a.heads = heads;
  return a;
}

Tensor AttentionLayer::operator()(const Tensor& queries, const Tensor& keys, const Tensor& values) const {
  return out(attention(q(queries), k(keys), v(values), heads));
}

Tensor to_tokens(const Tensor& chw) {
  const std::size_t c = chw.dim(0), hw = chw.dim(1) * chw.dim(2);
  return transpose(reshape(chw, {c, hw}));
}

Tensor from_tokens(const Tensor& tokens, std::size_t h, std::size_t w) {
  const std::size_t c = tokens.dim(1);
  return reshape(transpose(tokens), {c, h, w});
}

}  // namespace nf
