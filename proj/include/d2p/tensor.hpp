#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "d2p/error.hpp"

namespace d2p {

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

// Calls fn(T{}) with T = float or double according to dtype.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::kF64) return fn(double{});
  return fn(float{});
}

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct Node {
  Shape shape;
  DType dtype = DType::kF32;
  Buffer value;
  Buffer grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t numel() const { return shape_numel(shape); }

  template <class T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(value);
  }
  template <class T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(value);
  }
  // Zero-allocates the gradient on first use.
  template <class T>
  std::vector<T>& grads() {
    auto& g = std::get<std::vector<T>>(grad);
    if (g.empty()) g.assign(numel(), T{0});
    return g;
  }
  bool has_grad() const {
    return std::visit([](const auto& g) { return !g.empty(); }, grad);
  }
};

using NodePtr = std::shared_ptr<Node>;

Buffer make_buffer(DType dtype, std::size_t n);

}  // namespace detail

// Dense row-major tensor. Values are immutable once created except for leaf
// tensors, which the optimizer updates in place between steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, DType dtype = DType::kF32,
                      bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::kF32,
                     bool requires_grad = false);
  static Tensor from(const Shape& shape, std::span<const double> values,
                     DType dtype = DType::kF32, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::initializer_list<double> values,
                     DType dtype = DType::kF32, bool requires_grad = false);
  static Tensor scalar(double value, DType dtype = DType::kF32);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return node().numel(); }
  DType dtype() const { return node().dtype; }
  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().is_leaf; }
  const char* op_name() const { return node().op; }

  template <class T>
  std::span<const T> data() const {
    check_dtype<T>();
    return node().template values<T>();
  }
  // Leaf-only mutable access (parameter updates, test fixtures).
  template <class T>
  std::span<T> mutable_data() {
    check_dtype<T>();
    require_leaf();
    return node().template values<T>();
  }

  double item() const;
  double at(std::size_t flat_index) const;
  void set(std::size_t flat_index, double value);  // leaf only
  std::vector<double> to_vector() const;

  // Accumulated gradient as a fresh constant tensor (zeros if none).
  Tensor grad() const;
  std::vector<double> grad_vector() const;
  bool has_grad() const { return node().has_grad(); }
  void zero_grad();
  void set_requires_grad(bool value);  // leaf only

  // Same values, no history.
  Tensor detach() const;
  Tensor cast(DType dtype) const;
  Tensor clone() const;

  detail::Node& node() const;
  const detail::NodePtr& node_ptr() const { return node_; }

 private:
  template <class T>
  void check_dtype() const {
    const DType want = sizeof(T) == 8 ? DType::kF64 : DType::kF32;
    if (dtype() != want) {
      throw ContractError(std::string("tensor dtype is ") + dtype_name(dtype()) +
                          ", requested " + dtype_name(want));
    }
  }
  void require_leaf() const;

  detail::NodePtr node_;
};

// Gradient recording is on by default; the guard disables it for the
// current thread (inference, finite differences).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
// the recorded graph below `loss` is released afterwards.
void backward(const Tensor& loss);

// A named trainable leaf.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  const std::string& name() const { return name_; }
  Tensor& value() { return value_; }
  const Tensor& value() const { return value_; }
  Tensor grad() const { return value_.grad(); }
  const Shape& shape() const { return value_.shape(); }

 private:
  std::string name_;
  Tensor value_;
};

using ParameterList = std::vector<Parameter*>;

}  // namespace d2p
