#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "d2p/tensor.hpp"

namespace d2p {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<leaf>[<index>]: analytic=..., numeric=..."
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

// Compares reverse-mode gradients of loss_fn() against central differences
// on the given leaves. loss_fn must be deterministic and rebuild its graph
// on every call. If `samples` > 0, only that many entries (chosen by `seed`)
// are perturbed; otherwise every entry is.
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                std::vector<Tensor> leaves, double eps,
                                double floor = 1e-6, std::size_t samples = 0,
                                std::uint64_t seed = 0);

}  // namespace d2p
