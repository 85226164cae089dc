#include "icsinet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace icsinet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->id = detail::next_node_id();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->data = std::move(values);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->id = detail::next_node_id();
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros_like(const Tensor& other) {
  return Tensor(other.shape(), T{0});
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return node_ ? node_->data.size() : 0;
}

template <typename T>
std::span<T> Tensor<T>::data() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a single-element tensor, got shape " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_) throw ContractError("use of an undefined tensor");
  if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return node_ && !node_->backward;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient buffer");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
std::uint64_t Tensor<T>::node_id() const {
  return node_ ? node_->id : 0;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data);
}

// ---------------------------------------------------------------------------
// Graph recording

namespace {

template <typename T, typename Range>
Tensor<T> make_result_impl(Shape shape, std::vector<T> values, const Range& inputs,
                           std::function<void(detail::Node<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->id = detail::next_node_id();
  bool record = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) record = record || in.requires_grad();
  }
  if (record) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  return make_result_impl<T>(std::move(shape), std::move(values), inputs, std::move(backward));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  return make_result_impl<T>(std::move(shape), std::move(values), inputs, std::move(backward));
}

template <typename T>
Graph<T> Graph<T>::trace(const Tensor<T>& root) {
  Graph g;
  if (!root.defined()) return g;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<typename Tensor<T>::NodePtr> stack{root.node()};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!n->backward || !seen.insert(n.get()).second) continue;
    for (const auto& p : n->parents) {
      if (p->backward && !seen.count(p.get())) stack.push_back(p);
    }
    g.nodes_.push_back(std::move(n));
  }
  std::sort(g.nodes_.begin(), g.nodes_.end(),
            [](const auto& a, const auto& b) { return a->id < b->id; });
  return g;
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (!root.defined()) throw ContractError("backward: undefined root");
  if (root.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) throw ContractError("backward: root does not depend on any tensor requiring grad");

  const auto graph = Graph<T>::trace(root);
  for (const auto& n : graph.nodes()) n->grad.assign(n->data.size(), T{0});
  root.node()->ensure_grad()[0] += T{1};

  const auto nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto& n = **it;
    n.backward(n);
    // Intermediate gradients are not retained past the sweep.
    std::vector<T>().swap(n.grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [deriv](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    T* __restrict g = in.ensure_grad().data();
    const T* __restrict dy = self.grad.data();
    const T* __restrict xv = in.data.data();
    const T* __restrict yv = self.data.data();
    const std::size_t count = self.grad.size();
    for (std::size_t i = 0; i < count; ++i) g[i] += dy[i] * deriv(xv[i], yv[i]);
  });
}

enum class Broadcast { None, Left, Right };

template <typename T>
Broadcast resolve_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (b.numel() == 1) return Broadcast::Right;
  if (a.numel() == 1) return Broadcast::Left;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// f(a, b) with derivatives da(a, b), db(a, b).
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  const auto mode = resolve_broadcast(op, a, b);
  const auto as = a.data();
  const auto bs = b.data();
  const std::size_t n = mode == Broadcast::Left ? bs.size() : as.size();
  const Shape shape = mode == Broadcast::Left ? b.shape() : a.shape();
  auto ai = [mode](std::size_t i) { return mode == Broadcast::Left ? std::size_t{0} : i; };
  auto bi = [mode](std::size_t i) { return mode == Broadcast::Right ? std::size_t{0} : i; };
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(as[ai(i)], bs[bi(i)]);
  return make_result<T>(shape, std::move(out), {a, b}, [=](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const std::size_t count = self.grad.size();
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < count; ++i) {
        g[ai(i)] += self.grad[i] * da(pa.data[ai(i)], pb.data[bi(i)]);
      }
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < count; ++i) {
        g[bi(i)] += self.grad[i] * db(pa.data[ai(i)], pb.data[bi(i)]);
      }
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary<T>(
      x, [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x,
      [](T v) {
        // Branches keep exp() from overflowing for large |v|.
        if (v >= 0) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, T exponent) {
  return unary<T>(
      x, [exponent](T v) { return std::pow(v, exponent); },
      [exponent](T v, T) { return exponent * std::pow(v, exponent - T{1}); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{1}, {acc}, {x}, [](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const auto xs = x.data();
  std::vector<T> out(outer * inner, T{0});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < len; ++k) {
      const T* src = xs.data() + (o * len + k) * inner;
      T* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return make_result<T>(out_shape, std::move(out), {x}, [outer, inner, len](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < len; ++k) {
        T* dst = g.data() + (o * len + k) * inner;
        const T* src = self.grad.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  return scale(sum(x, axis), T{1} / static_cast<T>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> values(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(values), {x}, [](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {

// Maps each output flat index to its input flat index for a swap of two axes.
std::vector<std::size_t> transpose_index(const Shape& in_shape, std::size_t a, std::size_t b) {
  const std::size_t rank = in_shape.size();
  Shape out_shape = in_shape;
  std::swap(out_shape[a], out_shape[b]);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<std::size_t> perm_strides = in_strides;
  std::swap(perm_strides[a], perm_strides[b]);

  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) src += idx[d] * perm_strides[d];
    map[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis_a, std::size_t axis_b) {
  const auto& s = x.shape();
  if (axis_a >= s.size() || axis_b >= s.size()) {
    throw ShapeError("transpose: axes out of range for shape " + shape_str(s));
  }
  Shape out_shape = s;
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  auto map = std::make_shared<std::vector<std::size_t>>(transpose_index(s, axis_a, axis_b));
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[(*map)[i]];
  return make_result<T>(out_shape, std::move(out), {x}, [map](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const std::size_t width = end - begin;
  Shape out_shape = s;
  out_shape[axis] = width;

  const auto xs = x.data();
  std::vector<T> out(outer * width * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xs.data() + (o * len + begin) * inner, width * inner, out.data() + o * width * inner);
  }
  return make_result<T>(out_shape, std::move(out), {x}, [=](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      T* dst = g.data() + (o * len + begin) * inner;
      const T* src = self.grad.data() + o * width * inner;
      for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 4) throw ShapeError("slice_channels: expected NCHW tensor, got " + shape_str(x.shape()));
  return slice(x, 1, begin, end);
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  const auto xs = x.data();
  std::vector<To> out(xs.begin(), xs.end());
  return Tensor<To>(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------

#define ICSINET_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                      \
  template class Graph<T>;                                                                       \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::initializer_list<Tensor<T>>,     \
                                    std::function<void(detail::Node<T>&)>);                     \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,        \
                                    std::function<void(detail::Node<T>&)>);                     \
  template void backward<T>(const Tensor<T>&);                                                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                         \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                   \
  template Tensor<T> log<T>(const Tensor<T>&);                                                   \
  template Tensor<T> sqrt<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> pow<T>(const Tensor<T>&, T);                                                \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> transpose<T>(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);          \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::size_t, std::size_t);

ICSINET_INSTANTIATE(float)
ICSINET_INSTANTIATE(double)
#undef ICSINET_INSTANTIATE

template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace icsinet
