#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "icsinet/errors.hpp"

namespace icsinet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first gradient reaches this node
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

std::uint64_t next_node_id();

}  // namespace detail

/// Whether newly created op results are recorded for backward. Thread-local.
bool grad_enabled();

/// Disables graph recording for its lifetime (eval-mode inference, target rendering).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with shared ownership of its storage.
///
/// Copies are shallow: two Tensor handles may refer to the same graph node.
/// Every op result created while grad mode is enabled and at least one input
/// requires grad records a backward rule and its parents. Node ids increase
/// monotonically with creation, so reverse id order is reverse recording order.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor zeros_like(const Tensor& other);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  std::uint64_t node_id() const;

  /// Copy of the values with no graph history.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

/// Builds an op result. When recording applies, the result keeps `inputs` as
/// parents and `backward` as its gradient rule.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward);
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::Node<T>&)> backward);

/// Recorded operations reachable from a root, in recording order.
template <typename T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root);

  std::span<const typename Tensor<T>::NodePtr> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<typename Tensor<T>::NodePtr> nodes_;
};

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; use zero_grads (optim) or Tensor::zero_grad to reset them.
/// Intermediate gradients are reset at the start of every sweep.
template <typename T>
void backward(const Tensor<T>& root);

// Elementwise binary ops. Shapes must match, or one side must hold a single element.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T offset);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> pow(const Tensor<T>& x, T exponent);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Reduces one axis; the axis is removed from the result shape.
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::size_t axis_a, std::size_t axis_b);
/// Half-open range [begin, end) along `axis`.
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// Copies values into another precision. The result carries no history.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

}  // namespace icsinet
