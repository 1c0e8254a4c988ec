#include "d2p/losses.hpp"

#include <cmath>

namespace d2p {

namespace {

std::size_t count_floored(const Tensor& p, std::span<const double> row_weight) {
  const std::size_t cols = p.dim(1);
  std::size_t n = 0;
  dispatch(p.dtype(), [&]<class T>(T) {
    const auto v = p.data<T>();
    for (std::size_t r = 0; r < row_weight.size(); ++r) {
      if (row_weight[r] == 0.0) continue;
      for (std::size_t c = 0; c < cols; ++c) {
        if (static_cast<double>(v[r * cols + c]) < kProbabilityFloor) ++n;
      }
    }
  });
  return n;
}

Tensor safe_log(const Tensor& p) { return log(clamp_min(p, kProbabilityFloor)); }

// Row-wise KL(p || q) -> [M].
Tensor kl_rows(const Tensor& p, const Tensor& q) {
  return sum_last(mul(p, sub(safe_log(p), safe_log(q))));
}

Tensor norm_rows(const Tensor& p) {
  return sqrt(clamp_min(sum_last(mul(p, p)), kProbabilityFloor * kProbabilityFloor));
}

}  // namespace

const char* consistency_mode_name(ConsistencyMode m) {
  switch (m) {
    case ConsistencyMode::kKl: return "kl";
    case ConsistencyMode::kJs: return "js";
    case ConsistencyMode::kCosine: return "cosine";
  }
  return "?";
}

ConsistencyMode parse_consistency_mode(const std::string& s) {
  if (s == "kl") return ConsistencyMode::kKl;
  if (s == "js") return ConsistencyMode::kJs;
  if (s == "cosine") return ConsistencyMode::kCosine;
  throw ConfigError("unknown consistency mode '" + s + "' (expected kl, js or cosine)");
}

void LossWeights::validate() const {
  if (!(mu >= 0.0) || !(lambda >= 0.0)) {
    throw ConfigError("loss weights must be >= 0, got mu = " + std::to_string(mu) +
                      ", lambda = " + std::to_string(lambda));
  }
}

Tensor branch_nll(const Tensor& logits, std::span<const int> targets, double eps) {
  return label_smoothed_loss(logits, targets, eps);
}

ConsistencySum consistency_sum(const Tensor& p_d, const Tensor& p_a,
                               std::span<const int> targets, ConsistencyMode mode,
                               bool stop_gradient, int pad_id) {
  if (p_d.rank() != 2 || p_d.shape() != p_a.shape() || p_d.dim(0) != targets.size()) {
    throw ShapeError("consistency_loss: distributions " + shape_str(p_d.shape()) + " and " +
                     shape_str(p_a.shape()) + " for " + std::to_string(targets.size()) +
                     " targets");
  }
  std::vector<double> weight(targets.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != pad_id) {
      weight[i] = 1.0;
      ++count;
    }
  }
  if (count == 0) throw ContractError("consistency_loss: every target is PAD");
  const Tensor q = stop_gradient ? p_a.detach() : p_a;
  Tensor rows;
  switch (mode) {
    case ConsistencyMode::kKl:
      rows = kl_rows(p_d, q);
      break;
    case ConsistencyMode::kJs: {
      const Tensor m = scale(add(p_d, q), 0.5);
      rows = scale(add(kl_rows(p_d, m), kl_rows(q, m)), 0.5);
      break;
    }
    case ConsistencyMode::kCosine: {
      const Tensor dot = sum_last(mul(p_d, q));
      rows = add_scalar(neg(div(dot, mul(norm_rows(p_d), norm_rows(q)))), 1.0);
      break;
    }
  }
  const Tensor w = Tensor::from({targets.size()}, weight, p_d.dtype());
  return {sum(mul(rows, w)), count, count_floored(p_d, weight) + count_floored(p_a, weight)};
}

Tensor consistency_loss(const Tensor& p_d, const Tensor& p_a, std::span<const int> targets,
                        ConsistencyMode mode, bool stop_gradient, int pad_id) {
  const ConsistencySum s = consistency_sum(p_d, p_a, targets, mode, stop_gradient, pad_id);
  return scale(s.total, 1.0 / static_cast<double>(s.tokens));
}

}  // namespace d2p
