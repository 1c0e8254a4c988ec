#include <cmath>
#include <numeric>

#include "d2p/diffusion.hpp"
#include "doctest.h"

using namespace d2p;

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased
};

Moments moments(const Vec& xs) {
  Moments m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  for (double x : xs) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(xs.size() - 1);
  return m;
}

// |sample mean - mu| and |sample variance - sigma2| within 3 standard errors.
void check_distribution(const Vec& xs, double mu, double sigma2) {
  const double n = static_cast<double>(xs.size());
  const Moments m = moments(xs);
  INFO("mean " << m.mean << " vs " << mu << ", var " << m.var << " vs " << sigma2);
  CHECK(std::abs(m.mean - mu) <= 3.0 * std::sqrt(sigma2 / n));
  CHECK(std::abs(m.var - sigma2) <= 3.0 * sigma2 * std::sqrt(2.0 / (n - 1.0)));
}

Vec normals(Rng& rng, std::size_t n) {
  Vec v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// Four clusters in the plane, one per condition.
void two_d_sampler(Rng& rng, Vec& v0, Vec& c) {
  static const double centers[4][2] = {{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -0.5}};
  const auto k = rng.below(4);
  c.assign(4, 0.0);
  c[k] = 1.0;
  v0 = {centers[k][0] + 0.05 * rng.normal(), centers[k][1] + 0.05 * rng.normal()};
}

}  // namespace

TEST_CASE("schedule: cumulative products and validation") {
  auto s = NoiseSchedule::linear(50, 0.9999, 0.98);
  CHECK(s.steps() == 50);
  CHECK(s.alpha(0) == 1.0);
  CHECK(s.alpha(1) == doctest::Approx(0.9999));
  CHECK(s.alpha(50) == doctest::Approx(0.98));
  double prod = 1.0;
  for (std::size_t t = 1; t <= 50; ++t) {
    prod *= s.alpha(t);
    CHECK(s.cumulative(t) == doctest::Approx(prod).epsilon(1e-14));
    CHECK(s.cumulative(t) < s.cumulative(t - 1));
  }
  CHECK_THROWS_AS(NoiseSchedule(Vec{0.5, 0.0}), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule(Vec{1.2}), ConfigError);
}

TEST_CASE("forward_step: hand cases and range errors") {
  NoiseSchedule s(Vec{1.0, 0.5});
  const Vec v{0.3, -2.0}, eps{1.5, 0.25};
  CHECK(forward_step(v, 1, s, eps) == v);
  const auto out = forward_step(Vec{0.0, 0.0}, 2, s, eps);
  CHECK(out[0] == doctest::Approx(std::sqrt(0.5) * 1.5));
  CHECK(out[1] == doctest::Approx(std::sqrt(0.5) * 0.25));
  CHECK_THROWS_AS(forward_step(v, 0, s, eps), ContractError);
  CHECK_THROWS_AS(forward_step(v, 3, s, eps), ContractError);
}

TEST_CASE("forward composition matches the closed-form marginal") {
  const auto s = NoiseSchedule::linear(50, 0.9999, 0.98);
  const Vec v0{1.5, -0.7};
  const std::size_t n = 100000;
  Rng rng(21);
  Vec xs0(n), xs1(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec v = v0;
    for (std::size_t t = 1; t <= s.steps(); ++t) v = forward_step(v, t, s, normals(rng, 2));
    xs0[i] = v[0];
    xs1[i] = v[1];
  }
  const double ab = s.cumulative(50);
  check_distribution(xs0, std::sqrt(ab) * v0[0], 1.0 - ab);
  check_distribution(xs1, std::sqrt(ab) * v0[1], 1.0 - ab);
}

TEST_CASE("reverse_step: oracle inversion, zero noise and range") {
  NoiseSchedule s(Vec{0.9, 1.0, 0.8});
  Rng rng(22);
  const Vec v_prev = normals(rng, 5), eps = normals(rng, 5);
  OraclePredictor oracle;
  // alpha_{t-1} = 1 at t = 1 (alpha_0) and at t = 3 (alpha_2).
  for (std::size_t t : {1u, 3u}) {
    const Vec v_t = forward_step(v_prev, t, s, eps);
    oracle.set(t, eps);
    const Vec back = reverse_step(v_t, t, oracle, {}, s);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(back[i] - v_prev[i]) <= 1e-12);
  }

  ZeroPredictor zero;
  const Vec r = reverse_step(v_prev, 3, zero, {}, s);
  for (std::size_t i = 0; i < 5; ++i) CHECK(r[i] == doctest::Approx(v_prev[i] / std::sqrt(0.8)));

  CHECK_THROWS_AS(reverse_step(v_prev, 0, zero, {}, s), ContractError);

  // At t = 1 the standard rule adds no noise and coincides with the verbatim one.
  oracle.set(1, eps);
  const Vec a = reverse_step(v_prev, 1, oracle, {}, s, ReverseRule::kVerbatim);
  const Vec b = reverse_step(v_prev, 1, oracle, {}, s, ReverseRule::kStandardDdpm);
  for (std::size_t i = 0; i < 5; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  CHECK_THROWS_AS(reverse_step(v_prev, 3, zero, {}, s, ReverseRule::kStandardDdpm), ContractError);
}

TEST_CASE("oracle round trip error matches the accumulated re-noise variance") {
  const auto s = NoiseSchedule::linear(50, 0.9999, 0.98);
  const std::size_t T = s.steps(), trials = 10000;
  // e_{t-1} = e_t / sqrt(alpha_t) + sqrt(1 - alpha_{t-1}) eps_t, e_T = 0, so
  // Var(e_0) = sum_t (1 - alpha_{t-1}) prod_{s < t} 1 / alpha_s.
  double expected = 0.0;
  for (std::size_t t = 1; t <= T; ++t) {
    double gain = 1.0;
    for (std::size_t u = 1; u < t; ++u) gain /= s.alpha(u);
    expected += (1.0 - s.alpha(t - 1)) * gain;
  }
  Rng rng(23);
  Vec errors(trials);
  for (std::size_t i = 0; i < trials; ++i) {
    const Vec v0{rng.uniform(-1.0, 1.0)};
    OraclePredictor oracle;
    Vec v = v0;
    for (std::size_t t = 1; t <= T; ++t) {
      Vec eps = normals(rng, 1);
      v = forward_step(v, t, s, eps);
      oracle.set(t, std::move(eps));
    }
    for (std::size_t t = T; t >= 1; --t) v = reverse_step(v, t, oracle, {}, s);
    errors[i] = v[0] - v0[0];
  }
  check_distribution(errors, 0.0, expected);
}

TEST_CASE("ldm_loss: oracle is exact, zero predictor averages dim(v)") {
  const auto s = NoiseSchedule::linear(50, 0.9999, 0.98);
  Rng rng(24);
  const Vec v0 = normals(rng, 4), eps = normals(rng, 4);
  OraclePredictor oracle;
  oracle.set(7, eps);
  CHECK(ldm_loss(v0, 7, eps, oracle, {}, s) == 0.0);

  ZeroPredictor zero;
  const std::size_t n = 20000;
  Vec losses(n);
  for (std::size_t i = 0; i < n; ++i) {
    losses[i] = ldm_loss(v0, 1 + rng.below(50), normals(rng, 4), zero, {}, s);
  }
  // chi-square with 4 degrees of freedom: mean 4, variance 8.
  const Moments m = moments(losses);
  CHECK(std::abs(m.mean - 4.0) <= 3.0 * std::sqrt(8.0 / static_cast<double>(n)));
}

TEST_CASE("learned predictor halves the loss on the 2-D task within 2k steps") {
  const auto s = NoiseSchedule::linear(50, 0.99, 0.9);
  Rng init(25);
  LearnedPredictor model(2, 4, s.steps(), {}, init);
  PredictorTrainOptions opt;
  opt.iterations = 2000;
  const auto trace = train_predictor(model, s, two_d_sampler, opt);
  const double first = std::accumulate(trace.begin(), trace.begin() + 100, 0.0) / 100.0;
  const double last = std::accumulate(trace.end() - 100, trace.end(), 0.0) / 100.0;
  INFO("first " << first << " last " << last);
  CHECK(last <= 0.5 * first);

  // Guidance 1 reduces to the conditional prediction.
  model.set_guidance(1.0);
  const auto cond = model.forward({{0.2, 0.1}}, {10}, {{1.0, 0.0, 0.0, 0.0}}).to_vector();
  const auto guided = model.predict(Vec{0.2, 0.1}, 10, Vec{1.0, 0.0, 0.0, 0.0});
  CHECK(guided[0] == doctest::Approx(cond[0]).epsilon(1e-12));
  CHECK(guided[1] == doctest::Approx(cond[1]).epsilon(1e-12));
}

TEST_CASE("gaussian prior predictor is the exact posterior noise estimate") {
  // With sigma = 0 the data is the mean itself, so the predictor recovers
  // the injected noise exactly.
  const auto s = NoiseSchedule::linear(20, 0.99, 0.9);
  const Vec mu{0.4, -0.3, 0.9};
  GaussianPriorPredictor p(s, [&](std::span<const double>) { return mu; }, 0.0);
  Rng rng(26);
  const Vec eps = normals(rng, 3);
  for (std::size_t t : {1u, 10u, 20u}) {
    const Vec pred = p.predict(forward_marginal(mu, t, s, eps), t, {});
    for (std::size_t i = 0; i < 3; ++i) CHECK(pred[i] == doctest::Approx(eps[i]).epsilon(1e-9));
  }
}

TEST_CASE("feature provider: determinism, noise statistics and distinct sentences") {
  FeatureConfig cfg;
  cfg.rows = 50;
  cfg.dim = 64;
  FeatureProvider provider(cfg);
  const std::vector<int> ids{5, 9, 12, 2};
  const auto a = provider.features(ids, FeatureMode::kReconstructed);
  const auto b = provider.features(ids, FeatureMode::kReconstructed);
  CHECK(a == b);
  CHECK(a.size() == 3200);

  const auto noise = provider.features(ids, FeatureMode::kNoise);
  check_distribution(noise, 0.0, 1.0);

  FeatureConfig small;
  FeatureProvider p2(small);
  std::vector<Vec> seen;
  for (int s = 0; s < 10; ++s) {
    const std::vector<int> sent{4 + s, 7, 4 + (s * 3) % 11};
    const auto f = p2.features(sent, FeatureMode::kReconstructed);
    for (const auto& prev : seen) CHECK(f != prev);
    seen.push_back(f);
  }

  FeatureConfig other = small;
  other.seed = 48;
  CHECK(FeatureProvider(other).features(ids, FeatureMode::kReconstructed) !=
        p2.features(ids, FeatureMode::kReconstructed));
  CHECK(condition_vector(ids, 16) == condition_vector(ids, 16));
  CHECK_THROWS_AS(parse_feature_mode("pixels"), ConfigError);
}

TEST_CASE("reconstructed and authentic features are positively correlated") {
  FeatureConfig cfg;
  FeatureProvider provider(cfg);
  double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0;
  std::size_t n = 0;
  for (int s = 0; s < 20; ++s) {
    const std::vector<int> sent{4 + s % 7, 5 + s % 5, 6 + s};
    const auto r = provider.features(sent, FeatureMode::kReconstructed);
    const auto a = provider.features(sent, FeatureMode::kAuthentic);
    for (std::size_t i = 0; i < r.size(); ++i) {
      sx += r[i];
      sy += a[i];
      sxy += r[i] * a[i];
      sxx += r[i] * r[i];
      syy += a[i] * a[i];
      ++n;
    }
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double corr = cov / std::sqrt((sxx / n - (sx / n) * (sx / n)) * (syy / n - (sy / n) * (sy / n)));
  INFO("correlation " << corr);
  CHECK(corr > 0.2);
}
