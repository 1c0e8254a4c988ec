#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "d2p/tensor.hpp"

// Differentiable operations. Every op records a backward rule when any input
// requires a gradient and recording is enabled.
//
// Broadcasting in the elementwise ops is limited to two cases: one operand
// holds a single value, or one operand's shape equals the trailing
// dimensions of the other. Anything else is a ShapeError.
namespace d2p {

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
// max(x, floor); the gradient is passed only where x > floor.
Tensor clamp_min(const Tensor& x, double floor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reductions over the last axis; [..., n] -> [...].
Tensor sum_last(const Tensor& x);
Tensor mean_last(const Tensor& x);

// Row-wise over the last axis with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// Softmax where blocked[i] != 0 excludes element i. Rows with every entry
// blocked produce zeros; their indices are appended to `flagged_rows`.
Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> blocked,
                           std::vector<std::size_t>* flagged_rows = nullptr);

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x);  // rank-2 only

// Rows of `table` selected by ids; [V x d] -> [ids.size() x d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// out[i] = x[i, targets[i]] for x of shape [R x V].
Tensor pick_rows(const Tensor& x, std::span<const int> targets);

// Inverted dropout. Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad_top = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t groups = 1;

  static Conv2dOptions same(std::size_t pad) { return {1, pad, pad, pad, pad, 1}; }
};

// x: [B x C_in x H x W], kernel: [C_out x C_in/groups x kh x kw],
// bias: [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              const Conv2dOptions& options);

}  // namespace d2p
