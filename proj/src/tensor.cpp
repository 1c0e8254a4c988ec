#include "d2p/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace d2p {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) {
  return dtype == DType::kF64 ? "f64" : "f32";
}

namespace detail {

Buffer make_buffer(DType dtype, std::size_t n) {
  if (dtype == DType::kF64) return std::vector<double>(n, 0.0);
  return std::vector<float>(n, 0.0f);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

detail::NodePtr make_leaf(const Shape& shape, DType dtype, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->dtype = dtype;
  node->value = detail::make_buffer(dtype, shape_numel(shape));
  node->grad = detail::make_buffer(dtype, 0);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(const Shape& shape, DType dtype, bool requires_grad) {
  return Tensor(make_leaf(shape, dtype, requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype, bool requires_grad) {
  Tensor t = zeros(shape, dtype, requires_grad);
  dispatch(dtype, [&]<class T>(T) {
    auto& v = t.node().values<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from(const Shape& shape, std::span<const double> values, DType dtype,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t = zeros(shape, dtype, requires_grad);
  dispatch(dtype, [&]<class T>(T) {
    auto& v = t.node().values<T>();
    for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from(const Shape& shape, std::initializer_list<double> values, DType dtype,
                    bool requires_grad) {
  return from(shape, std::span<const double>(values.begin(), values.size()), dtype,
              requires_grad);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape()));
  }
  return shape()[axis];
}

void Tensor::require_leaf() const {
  if (!is_leaf()) throw ContractError("in-place mutation of a non-leaf tensor");
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return at(0);
}

double Tensor::at(std::size_t i) const {
  return dispatch(dtype(), [&]<class T>(T) -> double {
    return static_cast<double>(node().values<T>().at(i));
  });
}

void Tensor::set(std::size_t i, double value) {
  require_leaf();
  dispatch(dtype(), [&]<class T>(T) { node().values<T>().at(i) = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>(T) {
    const auto& v = node().values<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

Tensor Tensor::grad() const {
  Tensor g = zeros(shape(), dtype());
  if (has_grad()) g.node().value = node().grad;
  return g;
}

std::vector<double> Tensor::grad_vector() const { return grad().to_vector(); }

void Tensor::zero_grad() { node().grad = detail::make_buffer(dtype(), 0); }

void Tensor::set_requires_grad(bool value) {
  require_leaf();
  node().requires_grad = value;
}

Tensor Tensor::detach() const {
  auto n = make_leaf(shape(), dtype(), false);
  n->value = node().value;
  return Tensor(n);
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node().requires_grad = requires_grad();
  return t;
}

Tensor Tensor::cast(DType to) const {
  auto n = make_leaf(shape(), to, false);
  const auto src = to_vector();
  dispatch(to, [&]<class T>(T) {
    auto& v = n->values<T>();
    for (std::size_t i = 0; i < src.size(); ++i) v[i] = static_cast<T>(src[i]);
  });
  return Tensor(n);
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&loss.node(), 0);
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  dispatch(loss.dtype(), [&]<class T>(T) { loss.node().grads<T>()[0] += T{1}; });
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
  for (detail::Node* node : order) {
    if (node->is_leaf) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad = detail::make_buffer(node->dtype, 0);
  }
}

Parameter::Parameter(std::string name, Tensor value)
    : name_(std::move(name)), value_(std::move(value)) {
  value_.set_requires_grad(true);
}

}  // namespace d2p
