#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nucleiforge/tensor.hpp"

namespace nf {

/// Receives dL/d(output) and returns dL/d(input_k) for every recorded input,
/// in input order. An empty vector means "no gradient for this input".
using BackwardFn =
    std::function<std::vector<std::vector<double>>(const std::vector<double>& grad_out)>;

class GradStore {
 public:
  /// Gradient for a tensor recorded on the tape that produced this store.
  /// Returns std::nullopt when the tensor never reached the loss.
  std::optional<Tensor> grad(const Tensor& t) const;
  bool has(const Tensor& t) const { return grad(t).has_value(); }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::uint64_t serial_ = 0;
  std::map<std::uint32_t, Tensor> grads_;
  std::map<const void*, std::uint32_t> leaves_;
};

/// Explicitly scoped record of operations.
///
/// Nodes are appended in execution order, so the recorded list is already
/// topologically sorted. After backward() the tape is frozen until reset().
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  struct Node {
    std::string kind;
    Shape shape;
    std::vector<std::optional<std::uint32_t>> inputs;
    BackwardFn backward;  // empty for leaves
  };

  /// Leaf node for a requires_grad tensor, keyed by storage so repeated uses
  /// of one parameter share a node.
  NodeId leaf(const Tensor& t);

  /// Returns the node id for `t` on this tape, creating a leaf if `t`
  /// requires grad but is not yet recorded. std::nullopt for constants.
  std::optional<NodeId> resolve(const Tensor& t);

  NodeId record(std::string kind, Shape shape,
                std::vector<std::optional<NodeId>> inputs, BackwardFn backward);

  GradStore backward(const Tensor& loss);
  void reset();

  bool owns(const NodeId& id) const { return id.serial == serial_; }
  bool frozen() const { return frozen_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::uint64_t serial_;
  bool frozen_ = false;
  std::vector<Node> nodes_;
  std::map<const void*, std::uint32_t> leaves_;
};

/// The tape primitives record onto from the current thread, or nullptr.
Tape* active_tape();

/// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread (inference paths).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace nf
