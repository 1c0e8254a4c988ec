#include "d2p/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "d2p/rng.hpp"

namespace d2p {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                std::vector<Tensor> leaves, double eps, double floor,
                                std::size_t samples, std::uint64_t seed) {
  for (auto& leaf : leaves) leaf.zero_grad();
  backward(loss_fn());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::size_t i = 0; i < leaves[l].numel(); ++i) coords.emplace_back(l, i);
  if (samples > 0 && samples < coords.size()) {
    Rng rng(seed);
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(samples);
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto [l, i] : coords) {
    Tensor& leaf = leaves[l];
    const double analytic = leaf.grad().at(i);
    const double x0 = leaf.at(i);
    leaf.set(i, x0 + eps);
    const double up = loss_fn().item();
    leaf.set(i, x0 - eps);
    const double down = loss_fn().item();
    leaf.set(i, x0);
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic, numeric, floor);
    ++result.checked;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      std::ostringstream os;
      os << "leaf " << l << "[" << i << "]: analytic=" << analytic << ", numeric=" << numeric;
      result.worst = os.str();
    }
  }
  return result;
}

}  // namespace d2p
