#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "d2p/nn.hpp"
#include "d2p/optim.hpp"
#include "d2p/rng.hpp"

namespace d2p {

using Vec = std::vector<double>;

// alpha_1..alpha_T with alpha_0 := 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(Vec alphas);  // alphas[t - 1] = alpha_t
  static NoiseSchedule linear(std::size_t steps = 50, double first = 0.9999, double last = 0.98);

  std::size_t steps() const { return alpha_.size() - 1; }
  double alpha(std::size_t t) const;       // t in [0, T]
  double cumulative(std::size_t t) const;  // prod_{s <= t} alpha_s

 private:
  Vec alpha_{1.0};
  Vec cumulative_{1.0};
};

// v_t = sqrt(alpha_t) v_{t-1} + sqrt(1 - alpha_t) eps_t
Vec forward_step(std::span<const double> v_prev, std::size_t t, const NoiseSchedule& s,
                 std::span<const double> noise);

// z_t = sqrt(abar_t) v_0 + sqrt(1 - abar_t) eps
Vec forward_marginal(std::span<const double> v0, std::size_t t, const NoiseSchedule& s,
                     std::span<const double> noise);

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Vec predict(std::span<const double> v_t, std::size_t t,
                      std::span<const double> c) const = 0;
};

// Returns the noise registered for step t; exact by construction.
class OraclePredictor : public NoisePredictor {
 public:
  void set(std::size_t t, Vec noise);
  Vec predict(std::span<const double> v_t, std::size_t t,
              std::span<const double> c) const override;

 private:
  std::vector<Vec> noise_;
};

class ZeroPredictor : public NoisePredictor {
 public:
  Vec predict(std::span<const double> v_t, std::size_t, std::span<const double>) const override {
    return Vec(v_t.size(), 0.0);
  }
};

// Exact noise predictor for data v_0 ~ N(mean(c), sigma^2 I): estimates v_0
// by its posterior mean given v_t and returns the implied noise.
class GaussianPriorPredictor : public NoisePredictor {
 public:
  using MeanFn = std::function<Vec(std::span<const double> c)>;
  GaussianPriorPredictor(const NoiseSchedule& schedule, MeanFn mean, double sigma);
  Vec predict(std::span<const double> v_t, std::size_t t,
              std::span<const double> c) const override;

 private:
  const NoiseSchedule* schedule_;
  MeanFn mean_;
  double sigma_;
};

enum class ReverseRule {
  kVerbatim,     // re-noise term reuses the predicted noise
  kStandardDdpm  // posterior mean plus fresh Gaussian noise
};

// One reverse step t -> t-1. `rng` supplies fresh noise for kStandardDdpm.
Vec reverse_step(std::span<const double> v_t, std::size_t t, const NoisePredictor& predictor,
                 std::span<const double> c, const NoiseSchedule& s,
                 ReverseRule rule = ReverseRule::kVerbatim, Rng* rng = nullptr);

// ||eps - eps_theta(z_t, t, c)||^2 with z_t from the closed-form marginal.
double ldm_loss(std::span<const double> v0, std::size_t t, std::span<const double> eps,
                const NoisePredictor& predictor, std::span<const double> c,
                const NoiseSchedule& s);

// Sinusoidal embedding of the step index, width `dim`.
Vec step_embedding(std::size_t t, std::size_t steps, std::size_t dim);

// Two-layer ReLU network over [v_t; embed(t); c] with classifier-free
// guidance at sampling time: eps_u + g (eps_c - eps_u), eps_u using c = 0.
class LearnedPredictor : public NoisePredictor {
 public:
  struct Options {
    std::size_t hidden = 64;
    std::size_t time_dim = 8;
    double guidance = 7.5;
  };

  LearnedPredictor(std::size_t dim, std::size_t cond_dim, std::size_t steps, const Options& o,
                   Rng& rng);

  Vec predict(std::span<const double> v_t, std::size_t t,
              std::span<const double> c) const override;
  // Unguided prediction as a differentiable [B x dim] tensor.
  Tensor forward(const std::vector<Vec>& v_t, const std::vector<std::size_t>& t,
                 const std::vector<Vec>& c) const;
  void collect(ParameterList& out);
  double guidance() const { return options_.guidance; }
  void set_guidance(double g) { options_.guidance = g; }

 private:
  std::size_t dim_, cond_dim_, steps_;
  Options options_;
  Linear in_, out_;
};

struct PredictorTrainOptions {
  std::size_t iterations = 2000;
  std::size_t batch = 32;
  double lr = 3e-3;
  double cond_dropout = 0.1;  // probability of training on c = 0
  std::uint64_t seed = 47;
};

// Draws (v_0, c) training pairs.
using DiffusionSampler = std::function<void(Rng& rng, Vec& v0, Vec& c)>;

// Minimizes the batch-mean ldm loss; returns the loss of every iteration.
std::vector<double> train_predictor(LearnedPredictor& model, const NoiseSchedule& s,
                                    const DiffusionSampler& sample,
                                    const PredictorTrainOptions& options);

// ---------------------------------------------------------------------------
// Feature provider

enum class FeatureMode { kReconstructed, kNoise, kAuthentic };

const char* feature_mode_name(FeatureMode m);
FeatureMode parse_feature_mode(const std::string& s);

struct FeatureConfig {
  std::size_t rows = 8;          // K
  std::size_t dim = 16;          // D
  std::size_t cond_dim = 16;
  std::size_t steps = 50;
  double alpha_first = 0.9999;
  double alpha_last = 0.98;
  double prior_sigma = 0.1;      // spread of authentic features around their mean
  ReverseRule rule = ReverseRule::kVerbatim;
  std::uint64_t seed = 47;
};

// Deterministic condition embedding of a sentence's token ids.
Vec condition_vector(std::span<const int> ids, std::size_t cond_dim);

// Pure function of (ids, mode, config). Authentic mode is the surrogate
// image model: tanh(M c) + sigma * noise. Reconstructed mode runs the
// reverse chain from seeded noise with the Gaussian-prior predictor of that
// same image model. Noise mode is a seeded standard normal matrix.
class FeatureProvider {
 public:
  explicit FeatureProvider(const FeatureConfig& config);
  const FeatureConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  Vec features(std::span<const int> ids, FeatureMode mode) const;
  Vec mean(std::span<const double> c) const;  // tanh(M c)

 private:
  FeatureConfig config_;
  NoiseSchedule schedule_;
  Vec projection_;  // M, [K*D x cond_dim]
};

}  // namespace d2p
