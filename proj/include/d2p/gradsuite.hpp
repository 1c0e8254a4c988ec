#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "d2p/dual_branch.hpp"
#include "d2p/gradcheck.hpp"

namespace d2p {

// One differentiable operation under the finite-difference oracle.
struct OpGradCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> inputs;  // f64 leaves
  std::function<Tensor(const std::vector<Tensor>&)> op;
};

std::vector<OpGradCase> op_gradient_cases();

struct OpGradReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Each case on `instances` random inputs in f64, loss = random projection
// of the op output.
std::vector<OpGradReport> run_op_gradient_checks(std::size_t instances = 10,
                                                 std::uint64_t seed = 47);

// Vocabulary 12, d = 16, one encoder and one decoder layer.
DualBranchConfig tiny_gradcheck_config();

struct ComposedCheckOptions {
  DType analytic = DType::kF32;  // dtype of the model that produces gradients
  std::size_t samples = 3000;    // parameter entries perturbed; 0 = all
  double eps = 1e-6;             // central-difference step, applied in f64
  double floor = 1e-4;           // relative-error denominator floor
  std::uint64_t seed = 47;
};

// Gradient of the full dual-branch objective (both translation losses plus
// the KL consistency term) from a model in `analytic` precision against
// central differences of an f64 copy holding the same parameter values.
GradCheckResult composed_gradient_check(const ComposedCheckOptions& options = {});

}  // namespace d2p
