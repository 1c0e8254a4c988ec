#include "d2p/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "d2p/ops.hpp"
#include "d2p/rng.hpp"
#include "d2p/train.hpp"

namespace d2p {

namespace {

Tensor random_leaf(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, v, DType::kF64, true);
}

// Moves entries out of [c - gap, c + gap] so kinks stay clear of the step.
Tensor away_from(Tensor t, double c, double gap, double moved) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (std::abs(t.at(i) - c) < gap) t.set(i, moved);
  return t;
}

Tensor projected_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, Tensor::from(y.shape(), w, y.dtype())));
}

using In = std::vector<Tensor>;

OpGradCase unary(std::string name, Shape shape, double lo, double hi,
                 std::function<Tensor(const Tensor&)> f) {
  return {std::move(name),
          [shape, lo, hi](Rng& r) { return In{random_leaf(shape, r, lo, hi)}; },
          [f](const In& in) { return f(in[0]); }};
}

OpGradCase binary(std::string name, Shape a, Shape b, double lo, double hi,
                  std::function<Tensor(const Tensor&, const Tensor&)> f) {
  return {std::move(name),
          [a, b, lo, hi](Rng& r) { return In{random_leaf(a, r, lo, hi), random_leaf(b, r, lo, hi)}; },
          [f](const In& in) { return f(in[0], in[1]); }};
}

}  // namespace

std::vector<OpGradCase> op_gradient_cases() {
  std::vector<OpGradCase> c;
  c.push_back(binary("matmul", {5, 4}, {4, 3}, -1, 1, [](auto& a, auto& b) { return matmul(a, b); }));
  c.push_back(binary("add", {3, 4}, {4}, -1, 1, [](auto& a, auto& b) { return add(a, b); }));
  c.push_back(binary("sub", {3, 4}, {3, 4}, -1, 1, [](auto& a, auto& b) { return sub(a, b); }));
  c.push_back(binary("mul", {2, 3, 4}, {3, 4}, -1, 1, [](auto& a, auto& b) { return mul(a, b); }));
  c.push_back(binary("div", {3, 4}, {3, 4}, 0.5, 2, [](auto& a, auto& b) { return div(a, b); }));
  c.push_back(unary("scale", {3, 4}, -1, 1, [](auto& x) { return scale(x, -1.7); }));
  c.push_back(unary("add_scalar", {3, 4}, -1, 1, [](auto& x) { return mul(add_scalar(x, 0.4), x); }));
  c.push_back(unary("neg", {3, 4}, -1, 1, [](auto& x) { return neg(x); }));
  c.push_back({"relu", [](Rng& r) { return In{away_from(random_leaf({3, 5}, r), 0.0, 0.05, 0.3)}; },
               [](const In& in) { return relu(in[0]); }});
  c.push_back(unary("exp", {2, 5}, -1, 1, [](auto& x) { return exp(x); }));
  c.push_back(unary("log", {2, 5}, 0.5, 2, [](auto& x) { return log(x); }));
  c.push_back(unary("sqrt", {2, 5}, 0.5, 2, [](auto& x) { return sqrt(x); }));
  c.push_back(unary("tanh", {2, 5}, -1, 1, [](auto& x) { return tanh(x); }));
  c.push_back({"clamp_min",
               [](Rng& r) { return In{away_from(random_leaf({3, 4}, r), 0.1, 0.05, 0.5)}; },
               [](const In& in) { return clamp_min(in[0], 0.1); }});
  c.push_back(unary("sum", {3, 4}, -1, 1, [](auto& x) { return mul(sum(x), x); }));
  c.push_back(unary("mean", {3, 4}, -1, 1, [](auto& x) { return mul(mean(x), x); }));
  c.push_back(unary("sum_last", {4, 6}, -1, 1, [](auto& x) { return sum_last(x); }));
  c.push_back(unary("mean_last", {4, 6}, -1, 1, [](auto& x) { return mean_last(x); }));
  c.push_back(unary("softmax_rows", {3, 7}, -3, 3, [](auto& x) { return softmax_rows(x); }));
  c.push_back(unary("log_softmax_rows", {3, 7}, -3, 3, [](auto& x) { return log_softmax_rows(x); }));
  c.push_back(unary("masked_softmax_rows", {3, 4}, -2, 2, [](auto& x) {
    const std::vector<std::uint8_t> m{0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1};
    return masked_softmax_rows(x, m);
  }));
  c.push_back({"layer_norm_rows",
               [](Rng& r) {
                 return In{random_leaf({3, 6}, r, -2, 2), random_leaf({6}, r), random_leaf({6}, r)};
               },
               [](const In& in) { return layer_norm_rows(in[0], in[1], in[2]); }});
  c.push_back(binary("concat", {2, 3}, {2, 4}, -1, 1, [](auto& a, auto& b) { return concat({a, b, a}, 1); }));
  c.push_back(unary("slice", {4, 5, 3}, -1, 1, [](auto& x) { return slice(x, 1, 1, 3); }));
  c.push_back(unary("reshape", {4, 6}, -1, 1, [](auto& x) { return reshape(x, {3, 8}); }));
  c.push_back(unary("transpose", {4, 6}, -1, 1, [](auto& x) { return transpose(x); }));
  c.push_back(unary("embedding_lookup", {5, 4}, -1, 1, [](auto& x) {
    const int ids[] = {4, 0, 4, 2};
    return embedding_lookup(x, ids);
  }));
  c.push_back(unary("pick_rows", {3, 4}, -1, 1, [](auto& x) {
    const int t[] = {1, 3, 0};
    return pick_rows(x, t);
  }));
  c.push_back(unary("dropout", {3, 4}, -1, 1, [](auto& x) { return dropout(x, 0.3, true, 99); }));
  c.push_back({"conv2d",
               [](Rng& r) {
                 return In{random_leaf({2, 2, 5, 4}, r), random_leaf({3, 2, 3, 3}, r), random_leaf({3}, r)};
               },
               [](const In& in) { return conv2d(in[0], in[1], in[2], Conv2dOptions::same(1)); }});
  c.push_back({"conv2d_grouped_strided",
               [](Rng& r) { return In{random_leaf({1, 4, 7, 5}, r), random_leaf({2, 2, 3, 2}, r)}; },
               [](const In& in) { return conv2d(in[0], in[1], Tensor(), Conv2dOptions{2, 0, 1, 1, 0, 2}); }});
  c.push_back({"label_smoothed_loss",
               [](Rng& r) { return In{random_leaf({4, 6}, r, -2, 2)}; },
               [](const In& in) {
                 const int t[] = {5, 0, 2, 4};
                 return label_smoothed_loss(in[0], t, 0.1);
               }});
  return c;
}

std::vector<OpGradReport> run_op_gradient_checks(std::size_t instances, std::uint64_t seed) {
  std::vector<OpGradReport> out;
  std::uint64_t k = 0;
  for (const auto& c : op_gradient_cases()) {
    OpGradReport rep;
    rep.name = c.name;
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng(seed_combine(seed_combine(seed, ++k), i));
      In inputs = c.inputs(rng);
      const std::uint64_t wseed = rng.next_u64();
      const auto r = check_gradients([&] { return projected_sum(c.op(inputs), wseed); }, inputs,
                                     1e-4, 1e-6);
      rep.checked += r.checked;
      if (r.max_rel_error >= rep.max_rel_error) {
        rep.max_rel_error = r.max_rel_error;
        rep.worst = r.worst;
      }
    }
    out.push_back(std::move(rep));
  }
  return out;
}

DualBranchConfig tiny_gradcheck_config() {
  DualBranchConfig c;
  auto& t = c.transformer;
  t.vocab = 12;
  t.layers_enc = 1;
  t.layers_dec = 1;
  t.d = 16;
  t.ffn = 32;
  t.heads = 2;
  t.dropout = 0.0;
  t.max_len = 16;
  auto& p = c.prompt;
  p.feature_len = 6;
  p.feature_dim = 8;
  p.vpg.bottleneck = 16;
  p.alpha = 0.5;
  return c;
}

GradCheckResult composed_gradient_check(const ComposedCheckOptions& o) {
  const DualBranchConfig config = tiny_gradcheck_config();
  Rng init(o.seed);
  DualBranchModel analytic(config, init, o.analytic);
  Rng init64(o.seed);
  DualBranchModel reference(config, init64, DType::kF64);
  ParameterList pa, pr;
  analytic.collect(pa);
  reference.collect(pr);
  // Zero-initialized biases put ReLUs exactly on their kink; jitter every
  // parameter so no pre-activation sits there.
  Rng jitter(seed_combine(o.seed, 3));
  for (auto* p : pa) {
    auto v = p->value().to_vector();
    for (auto& x : v) x += jitter.uniform(-0.1, 0.1);
    p->value() = Tensor::from(p->shape(), v, o.analytic, true);
  }
  for (std::size_t i = 0; i < pa.size(); ++i) {
    // f64 copy of the exact values the analytic model holds.
    pr[i]->value() = Tensor::from(pa[i]->shape(), pa[i]->value().to_vector(), DType::kF64, true);
  }

  std::vector<Example> examples(2);
  examples[0] = {0, {4, 7, 9, 5, 2}, {8, 11, 6, 2}};
  examples[1] = {1, {10, 6, 4, 2}, {5, 9, 2}};
  Rng feat_rng(seed_combine(o.seed, 1));
  const std::size_t fn = config.prompt.feature_len * config.prompt.feature_dim;
  std::vector<std::vector<double>> rec(2, std::vector<double>(fn)), aut = rec;
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t i = 0; i < fn; ++i) {
      rec[e][i] = feat_rng.normal();
      aut[e][i] = rec[e][i] + 0.3 * feat_rng.normal();
    }
  }
  const Shape fshape{config.prompt.feature_len, config.prompt.feature_dim};
  LossWeights w;
  w.mu = 1.0;
  w.lambda = 1.0;
  auto objective = [&](const DualBranchModel& m, DType dtype) {
    Tensor total;
    std::size_t tokens = 0;
    for (std::size_t e = 0; e < examples.size(); ++e) {
      Tensor fr = Tensor::from(fshape, rec[e], DType::kF64).cast(dtype);
      Tensor fa = Tensor::from(fshape, aut[e], DType::kF64).cast(dtype);
      ObjectiveTerms t = example_objective(m, examples[e], fr, fa, w, 0.1, 0.0, 0);
      Tensor term = combine_objective(t.sdf, t.aut, t.consistency, w);
      total = total.defined() ? add(total, term) : term;
      tokens += t.tokens;
    }
    return scale(total, 1.0 / static_cast<double>(tokens));
  };

  for (auto* p : pa) p->value().zero_grad();
  backward(objective(analytic, o.analytic));

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < pa.size(); ++l)
    for (std::size_t i = 0; i < pa[l]->value().numel(); ++i) coords.emplace_back(l, i);
  if (o.samples > 0 && o.samples < coords.size()) {
    Rng rng(seed_combine(o.seed, 2));
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(o.samples);
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto [l, i] : coords) {
    Tensor& leaf = pr[l]->value();
    const double g = pa[l]->grad().at(i);
    const double x0 = leaf.at(i);
    leaf.set(i, x0 + o.eps);
    const double up = objective(reference, DType::kF64).item();
    leaf.set(i, x0 - o.eps);
    const double down = objective(reference, DType::kF64).item();
    leaf.set(i, x0);
    const double numeric = (up - down) / (2.0 * o.eps);
    const double err = relative_error(g, numeric, o.floor);
    ++result.checked;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      std::ostringstream os;
      os << pa[l]->name() << "[" << i << "]: analytic=" << g << ", numeric=" << numeric;
      result.worst = os.str();
    }
  }
  return result;
}

}  // namespace d2p
