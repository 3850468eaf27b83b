#include "nucleiforge/tape.hpp"

#include <atomic>
#include <stdexcept>

namespace nf {

namespace {

std::atomic<std::uint64_t> next_serial{1};
thread_local Tape* current_tape = nullptr;

}  // namespace

Tape* active_tape() { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

Tape::Tape() : serial_(next_serial.fetch_add(1)) {}

NodeId Tape::leaf(const Tensor& t) {
  if (frozen_) throw std::logic_error("tape: recording on a frozen tape; call reset() first");
  auto it = leaves_.find(t.storage_id());
  if (it != leaves_.end()) return {serial_, it->second};
  auto index = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(Node{"leaf", t.shape(), {}, {}});
  leaves_.emplace(t.storage_id(), index);
  return {serial_, index};
}

std::optional<NodeId> Tape::resolve(const Tensor& t) {
  if (t.node() && owns(*t.node())) return t.node();
  if (t.requires_grad()) return leaf(t);
  return std::nullopt;
}

NodeId Tape::record(std::string kind, Shape shape, std::vector<std::optional<NodeId>> inputs,
                    BackwardFn backward) {
  if (frozen_) throw std::logic_error("tape: recording on a frozen tape; call reset() first");
  Node node{std::move(kind), std::move(shape), {}, std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in && owns(*in)) {
      node.inputs.emplace_back(in->index);
    } else {
      node.inputs.emplace_back(std::nullopt);
    }
  }
  auto index = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(std::move(node));
  return {serial_, index};
}

GradStore Tape::backward(const Tensor& loss) {
  if (frozen_) throw std::logic_error("backward: called twice without reset()");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  GradStore store;
  store.serial_ = serial_;
  store.leaves_ = leaves_;
  frozen_ = true;
  if (!loss.node() || !owns(*loss.node())) return store;

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[loss.node()->index] = {1.0};
  for (std::size_t i = loss.node()->index + 1; i-- > 0;) {
    auto& g = grads[i];
    if (g.empty()) continue;
    const Node& node = nodes_[i];
    if (node.backward) {
      auto input_grads = node.backward(g);
      for (std::size_t k = 0; k < node.inputs.size() && k < input_grads.size(); ++k) {
        if (!node.inputs[k] || input_grads[k].empty()) continue;
        auto& dst = grads[*node.inputs[k]];
        if (dst.empty()) {
          dst = std::move(input_grads[k]);
        } else {
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += input_grads[k][j];
        }
      }
      // Interior gradients are not retained; only leaves are reported.
      g.clear();
      g.shrink_to_fit();
    } else {
      store.grads_.emplace(static_cast<std::uint32_t>(i), Tensor(node.shape, std::move(g)));
    }
  }
  return store;
}

void Tape::reset() {
  nodes_.clear();
  leaves_.clear();
  frozen_ = false;
  serial_ = next_serial.fetch_add(1);
}

std::optional<Tensor> GradStore::grad(const Tensor& t) const {
  std::optional<std::uint32_t> index;
  if (t.node() && t.node()->serial == serial_) index = t.node()->index;
  if (!index) {
    auto it = leaves_.find(t.storage_id());
    if (it != leaves_.end()) index = it->second;
  }
  if (!index) return std::nullopt;
  auto it = grads_.find(*index);
  if (it == grads_.end()) return std::nullopt;
  return it->second;
}

}  // namespace nf
