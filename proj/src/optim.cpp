#include "d2p/optim.hpp"

#include <algorithm>
#include <cmath>

namespace d2p {

Adam::Adam(ParameterList params, const AdamConfig& config)
    : params_(std::move(params)), config_(config) {
  if (config_.lr < 0.0 || config_.eps <= 0.0 || config_.beta1 < 0.0 || config_.beta1 >= 1.0 ||
      config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
    throw ConfigError("invalid Adam hyperparameters");
  }
  for (const auto* p : params_) {
    state_.m.emplace_back(p->value().numel(), 0.0);
    state_.v.emplace_back(p->value().numel(), 0.0);
  }
}

double Adam::learning_rate(std::uint64_t t) const {
  if (config_.warmup == 0) return config_.lr;
  const double w = static_cast<double>(config_.warmup);
  const double s = static_cast<double>(t);
  if (s < w) return config_.lr * s / w;
  if (config_.inverse_sqrt) return config_.lr * std::sqrt(w / s);
  return config_.lr;
}

void Adam::step(double grad_scale) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params_.size());
  for (const auto* p : params_) {
    auto g = p->value().grad_vector();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("non-finite gradient in parameter '" + p->name() + "' at index " +
                           std::to_string(i));
      }
      g[i] *= grad_scale;
    }
    grads.push_back(std::move(g));
  }

  const std::uint64_t t = ++state_.step;
  const double lr = learning_rate(t);
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& m = state_.m[k];
    auto& v = state_.v[k];
    const auto& g = grads[k];
    Tensor& value = params_[k]->value();
    dispatch(value.dtype(), [&]<class T>(T) {
      auto w = value.mutable_data<T>();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mh / (std::sqrt(vh) + config_.eps));
      }
    });
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto* p : params_) p->value().zero_grad();
}

void Adam::set_state(AdamState state) {
  if (state.m.size() != params_.size() || state.v.size() != params_.size()) {
    throw DataError("optimizer state holds " + std::to_string(state.m.size()) +
                    " tensors, model has " + std::to_string(params_.size()));
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (state.m[k].size() != params_[k]->value().numel() ||
        state.v[k].size() != params_[k]->value().numel()) {
      throw DataError("optimizer state size mismatch for '" + params_[k]->name() + "'");
    }
  }
  state_ = std::move(state);
}

}  // namespace d2p
