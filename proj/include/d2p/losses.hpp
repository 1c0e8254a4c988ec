#pragma once

#include <span>
#include <string>

#include "d2p/nn.hpp"

namespace d2p {

enum class ConsistencyMode { kKl, kJs, kCosine };

const char* consistency_mode_name(ConsistencyMode m);
ConsistencyMode parse_consistency_mode(const std::string& s);

struct LossWeights {
  double mu = 1.0;      // weight of the two translation losses
  double lambda = 1.0;  // weight of the consistency loss
  ConsistencyMode mode = ConsistencyMode::kKl;
  bool stop_gradient = false;  // detach the authentic distribution

  void validate() const;
};

// Probabilities below this are floored before taking logs or norms.
inline constexpr double kProbabilityFloor = 1e-12;

// Label-smoothed token-mean NLL of one branch.
Tensor branch_nll(const Tensor& logits, std::span<const int> targets, double eps = 0.1);

struct ConsistencySum {
  Tensor total;               // sum over non-PAD target positions
  std::size_t tokens = 0;
  std::size_t floored = 0;    // entries raised to kProbabilityFloor
};

// Per-position divergence between the reconstructed-branch distribution
// `p_d` and the authentic-branch distribution `p_a` (both [M x V], rows
// summing to one), summed over positions whose target is not PAD.
//   kl:     sum_v p_d log(p_d / p_a)
//   js:     (KL(p_d || m) + KL(p_a || m)) / 2 with m = (p_d + p_a) / 2
//   cosine: 1 - <p_d, p_a> / (|p_d| |p_a|)
ConsistencySum consistency_sum(const Tensor& p_d, const Tensor& p_a,
                               std::span<const int> targets, ConsistencyMode mode,
                               bool stop_gradient = false, int pad_id = kPadId);

// Token mean of consistency_sum. Throws ContractError if every target is PAD.
Tensor consistency_loss(const Tensor& p_d, const Tensor& p_a, std::span<const int> targets,
                        ConsistencyMode mode, bool stop_gradient = false,
                        int pad_id = kPadId);

}  // namespace d2p
