#include "d2p/diffusion.hpp"

#include <cmath>

namespace d2p {

namespace {

void check_step(std::size_t t, const NoiseSchedule& s, const char* what) {
  if (t < 1 || t > s.steps()) {
    throw ContractError(std::string(what) + ": step " + std::to_string(t) + " outside [1, " +
                        std::to_string(s.steps()) + "]");
  }
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

std::uint64_t ids_hash(std::span<const int> ids) {
  std::uint64_t h = 0x5a1ec7ed5eedULL;
  for (int id : ids) h = seed_combine(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(id)));
  return seed_combine(h, ids.size());
}

}  // namespace

NoiseSchedule::NoiseSchedule(Vec alphas) {
  if (alphas.empty()) throw ConfigError("noise schedule needs at least one step");
  alpha_.assign(1, 1.0);
  cumulative_.assign(1, 1.0);
  for (double a : alphas) {
    if (!(a > 0.0 && a <= 1.0)) {
      throw ConfigError("noise schedule coefficient " + std::to_string(a) + " outside (0, 1]");
    }
    alpha_.push_back(a);
    cumulative_.push_back(cumulative_.back() * a);
  }
}

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double first, double last) {
  if (steps == 0) throw ConfigError("noise schedule needs at least one step");
  Vec a(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    a[i] = first + (last - first) * f;
  }
  return NoiseSchedule(std::move(a));
}

double NoiseSchedule::alpha(std::size_t t) const {
  if (t >= alpha_.size()) throw ContractError("schedule step " + std::to_string(t) + " out of range");
  return alpha_[t];
}

double NoiseSchedule::cumulative(std::size_t t) const {
  if (t >= cumulative_.size()) {
    throw ContractError("schedule step " + std::to_string(t) + " out of range");
  }
  return cumulative_[t];
}

Vec forward_step(std::span<const double> v_prev, std::size_t t, const NoiseSchedule& s,
                 std::span<const double> noise) {
  check_step(t, s, "forward_step");
  check_same(v_prev.size(), noise.size(), "forward_step");
  const double a = s.alpha(t), keep = std::sqrt(a), add = std::sqrt(1.0 - a);
  Vec out(v_prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * v_prev[i] + add * noise[i];
  return out;
}

Vec forward_marginal(std::span<const double> v0, std::size_t t, const NoiseSchedule& s,
                     std::span<const double> noise) {
  check_same(v0.size(), noise.size(), "forward_marginal");
  const double ab = s.cumulative(t), keep = std::sqrt(ab), add = std::sqrt(1.0 - ab);
  Vec out(v0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * v0[i] + add * noise[i];
  return out;
}

void OraclePredictor::set(std::size_t t, Vec noise) {
  if (noise_.size() <= t) noise_.resize(t + 1);
  noise_[t] = std::move(noise);
}

Vec OraclePredictor::predict(std::span<const double> v_t, std::size_t t,
                             std::span<const double>) const {
  if (t >= noise_.size() || noise_[t].empty()) {
    throw ContractError("oracle predictor has no noise for step " + std::to_string(t));
  }
  check_same(v_t.size(), noise_[t].size(), "oracle predictor");
  return noise_[t];
}

GaussianPriorPredictor::GaussianPriorPredictor(const NoiseSchedule& schedule, MeanFn mean,
                                               double sigma)
    : schedule_(&schedule), mean_(std::move(mean)), sigma_(sigma) {
  if (sigma < 0.0) throw ConfigError("prior sigma must be >= 0");
}

Vec GaussianPriorPredictor::predict(std::span<const double> v_t, std::size_t t,
                                    std::span<const double> c) const {
  const double ab = schedule_->cumulative(t);
  const double rab = std::sqrt(ab), r1 = std::sqrt(1.0 - ab);
  const double s2 = sigma_ * sigma_;
  const double gain = s2 * rab / (ab * s2 + 1.0 - ab);
  const Vec mu = mean_(c);
  check_same(v_t.size(), mu.size(), "prior predictor");
  Vec eps(v_t.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double x0 = mu[i] + gain * (v_t[i] - rab * mu[i]);
    eps[i] = (v_t[i] - rab * x0) / r1;
  }
  return eps;
}

Vec reverse_step(std::span<const double> v_t, std::size_t t, const NoisePredictor& predictor,
                 std::span<const double> c, const NoiseSchedule& s, ReverseRule rule,
                 Rng* rng) {
  check_step(t, s, "reverse_step");
  const Vec eps = predictor.predict(v_t, t, c);
  check_same(v_t.size(), eps.size(), "reverse_step");
  const double a = s.alpha(t), a_prev = s.alpha(t - 1);
  Vec out(v_t.size());
  if (rule == ReverseRule::kVerbatim) {
    const double inv = 1.0 / std::sqrt(a), rm = std::sqrt(1.0 - a), re = std::sqrt(1.0 - a_prev);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = inv * (v_t[i] - rm * eps[i]) + re * eps[i];
    }
    return out;
  }
  const double ab = s.cumulative(t), ab_prev = s.cumulative(t - 1);
  const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
  const double sigma = t > 1 ? std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - a)) : 0.0;
  if (sigma > 0.0 && rng == nullptr) {
    throw ContractError("standard reverse rule needs a noise generator");
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (v_t[i] - coef * eps[i]) / std::sqrt(a);
    if (sigma > 0.0) out[i] += sigma * rng->normal();
  }
  return out;
}

double ldm_loss(std::span<const double> v0, std::size_t t, std::span<const double> eps,
                const NoisePredictor& predictor, std::span<const double> c,
                const NoiseSchedule& s) {
  check_step(t, s, "ldm_loss");
  const Vec z = forward_marginal(v0, t, s, eps);
  const Vec pred = predictor.predict(z, t, c);
  check_same(pred.size(), eps.size(), "ldm_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) total += (eps[i] - pred[i]) * (eps[i] - pred[i]);
  return total;
}

Vec step_embedding(std::size_t t, std::size_t steps, std::size_t dim) {
  Vec e(dim);
  const double x = static_cast<double>(t) / static_cast<double>(std::max<std::size_t>(steps, 1));
  for (std::size_t i = 0; i < dim; ++i) {
    const double freq = std::pow(2.0, static_cast<double>(i / 2)) * M_PI;
    e[i] = i % 2 == 0 ? std::sin(freq * x) : std::cos(freq * x);
  }
  return e;
}

// ---------------------------------------------------------------------------
// LearnedPredictor

LearnedPredictor::LearnedPredictor(std::size_t dim, std::size_t cond_dim, std::size_t steps,
                                   const Options& o, Rng& rng)
    : dim_(dim), cond_dim_(cond_dim), steps_(steps), options_(o) {
  const std::size_t in = dim + o.time_dim + cond_dim;
  in_ = Linear("ldm.fc1", in, o.hidden, rng, DType::kF64);
  out_ = Linear("ldm.fc2", o.hidden, dim, rng, DType::kF64);
}

Tensor LearnedPredictor::forward(const std::vector<Vec>& v_t, const std::vector<std::size_t>& t,
                                 const std::vector<Vec>& c) const {
  const std::size_t b = v_t.size();
  const std::size_t width = dim_ + options_.time_dim + cond_dim_;
  Vec rows;
  rows.reserve(b * width);
  for (std::size_t i = 0; i < b; ++i) {
    check_same(v_t[i].size(), dim_, "learned predictor input");
    check_same(c[i].size(), cond_dim_, "learned predictor condition");
    rows.insert(rows.end(), v_t[i].begin(), v_t[i].end());
    const Vec e = step_embedding(t[i], steps_, options_.time_dim);
    rows.insert(rows.end(), e.begin(), e.end());
    rows.insert(rows.end(), c[i].begin(), c[i].end());
  }
  Tensor x = Tensor::from({b, width}, rows, DType::kF64);
  return out_.forward(relu(in_.forward(x)));
}

Vec LearnedPredictor::predict(std::span<const double> v_t, std::size_t t,
                              std::span<const double> c) const {
  NoGradGuard no_grad;
  const Vec v(v_t.begin(), v_t.end());
  const Vec cond(c.begin(), c.end());
  const Vec zero(cond_dim_, 0.0);
  Tensor out = forward({v, v}, {t, t}, {cond, zero});
  const auto all = out.to_vector();
  Vec eps(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    const double ec = all[i], eu = all[dim_ + i];
    eps[i] = eu + options_.guidance * (ec - eu);
  }
  return eps;
}

void LearnedPredictor::collect(ParameterList& out) {
  in_.collect(out);
  out_.collect(out);
}

std::vector<double> train_predictor(LearnedPredictor& model, const NoiseSchedule& s,
                                    const DiffusionSampler& sample,
                                    const PredictorTrainOptions& options) {
  ParameterList params;
  model.collect(params);
  AdamConfig ac;
  ac.lr = options.lr;
  ac.beta2 = 0.999;
  ac.warmup = 0;
  Adam adam(params, ac);
  Rng rng(options.seed);
  std::vector<double> trace;
  trace.reserve(options.iterations);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    std::vector<Vec> z(options.batch), cs(options.batch);
    std::vector<std::size_t> ts(options.batch);
    Vec eps_all;
    for (std::size_t i = 0; i < options.batch; ++i) {
      Vec v0, c;
      sample(rng, v0, c);
      if (rng.uniform() < options.cond_dropout) c.assign(c.size(), 0.0);
      ts[i] = 1 + rng.below(s.steps());
      Vec eps(v0.size());
      for (auto& e : eps) e = rng.normal();
      z[i] = forward_marginal(v0, ts[i], s, eps);
      cs[i] = std::move(c);
      eps_all.insert(eps_all.end(), eps.begin(), eps.end());
    }
    Tensor pred = model.forward(z, ts, cs);
    Tensor target = Tensor::from(pred.shape(), eps_all, DType::kF64);
    Tensor diff = sub(target, pred);
    Tensor loss = scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(options.batch));
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("diffusion predictor loss is not finite");
    trace.push_back(value);
    backward(loss);
    adam.step();
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Features

const char* feature_mode_name(FeatureMode m) {
  switch (m) {
    case FeatureMode::kReconstructed: return "reconstructed";
    case FeatureMode::kNoise: return "noise";
    case FeatureMode::kAuthentic: return "authentic";
  }
  return "?";
}

FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "reconstructed") return FeatureMode::kReconstructed;
  if (s == "noise") return FeatureMode::kNoise;
  if (s == "authentic") return FeatureMode::kAuthentic;
  throw ConfigError("unknown feature mode '" + s + "' (expected reconstructed, noise or authentic)");
}

Vec condition_vector(std::span<const int> ids, std::size_t cond_dim) {
  Rng rng(ids_hash(ids));
  Vec c(cond_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(cond_dim, 1)));
  for (auto& x : c) x = rng.normal() * scale;
  return c;
}

FeatureProvider::FeatureProvider(const FeatureConfig& config)
    : config_(config),
      schedule_(NoiseSchedule::linear(config.steps, config.alpha_first, config.alpha_last)) {
  if (config.rows == 0 || config.dim == 0 || config.cond_dim == 0) {
    throw ConfigError("feature extents must be positive");
  }
  Rng rng(seed_combine(config.seed, hash_string("image-model")));
  projection_.resize(config.rows * config.dim * config.cond_dim);
  for (auto& m : projection_) m = 1.5 * rng.normal();
}

Vec FeatureProvider::mean(std::span<const double> c) const {
  const std::size_t n = config_.rows * config_.dim, k = config_.cond_dim;
  check_same(c.size(), k, "feature condition");
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += projection_[i * k + j] * c[j];
    out[i] = std::tanh(acc);
  }
  return out;
}

Vec FeatureProvider::features(std::span<const int> ids, FeatureMode mode) const {
  const std::size_t n = config_.rows * config_.dim;
  const std::uint64_t stream =
      seed_combine(seed_combine(config_.seed, ids_hash(ids)), static_cast<std::uint64_t>(mode));
  Rng rng(stream);
  const Vec c = condition_vector(ids, config_.cond_dim);
  Vec v(n);
  switch (mode) {
    case FeatureMode::kNoise:
      for (auto& x : v) x = rng.normal();
      return v;
    case FeatureMode::kAuthentic: {
      v = mean(c);
      for (auto& x : v) x += config_.prior_sigma * rng.normal();
      return v;
    }
    case FeatureMode::kReconstructed: {
      GaussianPriorPredictor predictor(
          schedule_, [this](std::span<const double> cc) { return mean(cc); },
          config_.prior_sigma);
      for (auto& x : v) x = rng.normal();
      for (std::size_t t = schedule_.steps(); t >= 1; --t) {
        v = reverse_step(v, t, predictor, c, schedule_, config_.rule, &rng);
      }
      return v;
    }
  }
  return v;
}

}  // namespace d2p
