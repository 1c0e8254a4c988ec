#pragma once

#include <cstdint>
#include <vector>

#include "d2p/tensor.hpp"

namespace d2p {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::size_t warmup = 2000;
  bool inverse_sqrt = false;  // decay as sqrt(warmup / t) after warmup
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Bias-corrected Adam over a fixed parameter list. Moments are kept in
// double precision whatever the parameter dtype.
class Adam {
 public:
  Adam(ParameterList params, const AdamConfig& config);

  // Learning rate used for update number t (1-based).
  double learning_rate(std::uint64_t t) const;

  // Applies one update from the accumulated gradients multiplied by
  // `grad_scale` (1 / micro-batches), then clears the gradients. A
  // non-finite gradient throws NumericError naming the parameter and
  // leaves every parameter untouched.
  void step(double grad_scale = 1.0);
  void zero_grad();

  const AdamState& state() const { return state_; }
  void set_state(AdamState state);
  const AdamConfig& config() const { return config_; }
  const ParameterList& params() const { return params_; }

 private:
  ParameterList params_;
  AdamConfig config_;
  AdamState state_;
};

}  // namespace d2p
