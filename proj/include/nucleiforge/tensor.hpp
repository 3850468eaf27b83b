#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AttrError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Handle into a Tape. `serial` identifies the tape generation so stale
/// handles from a reset or different tape are never dereferenced.
struct NodeId {
  std::uint64_t serial = 0;
  std::uint32_t index = 0;
  bool operator==(const NodeId&) const = default;
};

/// Dense row-major tensor of doubles.
///
/// Storage is shared between copies; every primitive produces fresh storage,
/// so a Tensor behaves as an immutable value unless `mutable_data()` is used
/// (which detaches shared storage first).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor eye(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  const double* raw() const { return data_ ? data_->data() : nullptr; }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  const std::optional<NodeId>& node() const { return node_; }
  void set_node(NodeId id) { node_ = id; }

  /// Same values and shape, no graph linkage, no grad requirement.
  Tensor detach() const;
  /// Deep copy of the values.
  Tensor clone() const;

  /// Identity of the underlying storage; used to key leaf nodes.
  const void* storage_id() const { return data_.get(); }

  bool bitwise_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  std::optional<NodeId> node_;
};

}  // namespace nf
