#include <cmath>
#include <map>

#include "d2p/dual_branch.hpp"
#include "d2p/gradcheck.hpp"
#include "doctest.h"

using namespace d2p;

namespace {

Tensor random_input(const Shape& shape, Rng& rng, DType dtype = DType::kF64) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(shape, v, dtype);
}

void fill(Tensor t, double value) {
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, value);
}

VisualPromptGenerator::Options small_vpg() {
  VisualPromptGenerator::Options o;
  o.bottleneck = 12;
  return o;
}

std::map<std::string, Parameter*> by_name(ParameterList ps) {
  std::map<std::string, Parameter*> out;
  for (auto* p : ps) out[p->name()] = p;
  return out;
}

DualBranchConfig tiny_dual() {
  DualBranchConfig c;
  c.transformer.vocab = 12;
  c.transformer.layers_enc = 1;
  c.transformer.layers_dec = 1;
  c.transformer.d = 8;
  c.transformer.ffn = 16;
  c.transformer.heads = 2;
  c.transformer.dropout = 0.0;
  c.transformer.max_len = 16;
  c.prompt.feature_len = 5;
  c.prompt.feature_dim = 6;
  c.prompt.vpg = small_vpg();
  return c;
}

}  // namespace

TEST_CASE("vpg: zero input with zeroed final convs gives a zero prompt") {
  Rng rng(1);
  VisualPromptGenerator g("vpg", 8, 16, {}, rng, DType::kF64);
  for (auto* p : g.final_convs()) fill(p->value(), 0.0);
  auto out = g.generate(Tensor::zeros({2, 8, 16}, DType::kF64));
  for (double v : out.to_vector()) CHECK(v == 0.0);
}

TEST_CASE("vpg: output shape equals input shape") {
  Rng rng(2);
  for (auto [l, d] : {std::pair<std::size_t, std::size_t>{8, 16}, {50, 64}}) {
    VisualPromptGenerator g("vpg", l, d, {}, rng, DType::kF32);
    auto out = g.generate(random_input({2, l, d}, rng, DType::kF32));
    CHECK(out.shape() == Shape{2, l, d});
  }
}

TEST_CASE("vpg: undersized planes are configuration errors") {
  Rng rng(3);
  CHECK_THROWS_AS(VisualPromptGenerator("vpg", 4, 16, {}, rng, DType::kF64), ConfigError);
  CHECK_THROWS_AS(VisualPromptGenerator("vpg", 8, 3, {}, rng, DType::kF64), ConfigError);
  VisualPromptGenerator::Options odd;
  odd.channels = 5;
  CHECK_THROWS_AS(VisualPromptGenerator("vpg", 8, 8, odd, rng, DType::kF64), ConfigError);
  VisualPromptGenerator g("vpg", 8, 8, {}, rng, DType::kF64);
  CHECK_THROWS_AS(g.generate(random_input({1, 8, 9}, rng)), ShapeError);
}

TEST_CASE("vpg: gradients through both branches pass the finite-difference check") {
  Rng rng(4);
  VisualPromptGenerator g("vpg", 6, 7, small_vpg(), rng, DType::kF64);
  ParameterList ps;
  g.collect(ps);
  Tensor x = random_input({2, 6, 7}, rng);
  x.set_requires_grad(true);
  std::vector<Tensor> leaves{x};
  for (auto* p : ps) leaves.push_back(p->value());
  Tensor w = random_input({2, 6, 7}, rng);
  auto loss = [&] { return sum(mul(g.generate(x), w)); };
  auto r = check_gradients(loss, leaves, 1e-6, 1e-6, 400, 11);
  INFO(r.worst);
  CHECK(r.max_rel_error <= 1e-3);
}

TEST_CASE("vpg: ablation toggles cut exactly their own path") {
  Rng rng(5);
  Tensor x = random_input({1, 6, 6}, rng);
  auto perturb_changes = [&](VisualPromptGenerator& g, const std::string& prefix) {
    auto params = [&] {
      ParameterList ps;
      g.collect(ps);
      return by_name(ps);
    }();
    auto before = g.generate(x).to_vector();
    for (auto& [name, p] : params) {
      if (name.rfind(prefix, 0) != 0) continue;
      for (std::size_t i = 0; i < p->value().numel(); ++i) {
        p->value().set(i, p->value().at(i) + 0.37);
      }
    }
    return g.generate(x).to_vector() != before;
  };
  auto opts = small_vpg();
  opts.use_global = false;
  VisualPromptGenerator no_global("vpg", 6, 6, opts, rng, DType::kF64);
  CHECK_FALSE(perturb_changes(no_global, "vpg.global.in"));
  CHECK_FALSE(perturb_changes(no_global, "vpg.global.depthwise"));
  CHECK_FALSE(perturb_changes(no_global, "vpg.global.out"));
  CHECK(perturb_changes(no_global, "vpg.global.linear"));
  CHECK(perturb_changes(no_global, "vpg.local"));

  opts = small_vpg();
  opts.use_local = false;
  VisualPromptGenerator no_local("vpg", 6, 6, opts, rng, DType::kF64);
  CHECK_FALSE(perturb_changes(no_local, "vpg.local"));
  CHECK(perturb_changes(no_local, "vpg.global"));

  // Disabled paths hold no trainable parameters.
  auto names = [](VisualPromptGenerator& g) {
    ParameterList ps;
    g.collect(ps);
    std::string all;
    for (auto* p : ps) all += p->name() + " ";
    return all;
  };
  CHECK(names(no_global).find("vpg.global.in") == std::string::npos);
  CHECK(names(no_global).find("vpg.global.linear") != std::string::npos);
  CHECK(names(no_local).find("vpg.local") == std::string::npos);
}

TEST_CASE("language prompt: singleton and identical prompts") {
  Rng rng(6);
  LanguagePrompt lp("lp", 4, rng, DType::kF64);
  Tensor text = random_input({3, 4}, rng);
  Tensor single = random_input({1, 4}, rng);
  auto xp = lp.attend(text, single);
  auto v = lp.value().forward(single).to_vector();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(xp.at(r * 4 + j) == doctest::Approx(v[j]));

  Tensor same = concat({single, single, single}, 0);
  auto w = lp.weights(text, same);
  for (double a : w.to_vector()) CHECK(a == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  auto xs = lp.attend(text, same);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(xs.at(r * 4 + j) == doctest::Approx(v[j]));

  CHECK_THROWS_AS(lp.attend(text, Tensor()), ContractError);
}

TEST_CASE("language prompt: two-key hand computation and row-stochastic weights") {
  Rng rng(7);
  LanguagePrompt lp("lp", 2, rng, DType::kF64);
  fill(lp.query().weight().value(), 0.0);
  fill(lp.key().weight().value(), 0.0);
  fill(lp.value().weight().value(), 0.0);
  // W_Q = W_K = I, W_V = [[1, 2], [0, 1]]
  lp.query().weight().value().set(0, 1.0);
  lp.query().weight().value().set(3, 1.0);
  lp.key().weight().value().set(0, 1.0);
  lp.key().weight().value().set(3, 1.0);
  auto& wv = lp.value().weight().value();
  wv.set(0, 1.0);
  wv.set(1, 2.0);
  wv.set(3, 1.0);
  Tensor x = Tensor::from({1, 2}, {1.0, 0.5}, DType::kF64);
  Tensor p = Tensor::from({2, 2}, {2.0, 0.0, -1.0, 1.0}, DType::kF64);
  // scores: [2, -0.5] / sqrt(2)
  const double s0 = 2.0 / std::sqrt(2.0), s1 = -0.5 / std::sqrt(2.0);
  const double a0 = std::exp(s0) / (std::exp(s0) + std::exp(s1)), a1 = 1.0 - a0;
  // value rows: p W_V = [[2, 4], [-1, -1]]
  auto xp = lp.attend(x, p);
  CHECK(xp.at(0) == doctest::Approx(a0 * 2.0 + a1 * -1.0).epsilon(1e-12));
  CHECK(xp.at(1) == doctest::Approx(a0 * 4.0 + a1 * -1.0).epsilon(1e-12));

  LanguagePrompt big("lp", 6, rng, DType::kF64);
  auto w = big.weights(random_input({9, 6}, rng), random_input({5, 6}, rng));
  for (std::size_t r = 0; r < 9; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 5; ++c) total += w.at(r * 5 + c);
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("coupling: identity, zero weight and dimension errors") {
  Rng rng(8);
  Coupling c("f", 4, 4, CouplingMode::kLinear, rng, DType::kF64);
  auto& w = c.projection().weight().value();
  fill(w, 0.0);
  for (std::size_t i = 0; i < 4; ++i) w.set(i * 4 + i, 1.0);
  Tensor vp = random_input({3, 4}, rng);
  CHECK(c.couple(vp).to_vector() == vp.to_vector());

  fill(w, 0.0);
  auto& b = c.projection().bias().value();
  for (std::size_t i = 0; i < 4; ++i) b.set(i, 0.25 * static_cast<double>(i) - 0.3);
  auto out = c.couple(vp);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(r * 4 + j) == b.at(j));

  CHECK_THROWS_AS(c.couple(random_input({3, 5}, rng)), ConfigError);

  auto padded = Coupling::identity_pad(vp, 6);
  CHECK(padded.shape() == Shape{3, 6});
  CHECK(padded.at(4) == 0.0);
  CHECK(padded.at(0) == vp.at(0));
  CHECK(Coupling::identity_pad(vp, 2).shape() == Shape{3, 2});
}

TEST_CASE("coupling: conv1d mode matches a direct sequence convolution") {
  Rng rng(9);
  Coupling c("f", 3, 2, CouplingMode::kConv1d, rng, DType::kF64);
  ParameterList ps;
  c.collect(ps);
  auto params = by_name(ps);
  auto k = params.at("f.conv.weight")->value().to_vector();  // [out x in x 1 x 3]
  auto cb = params.at("f.conv.bias")->value().to_vector();
  for (std::size_t i = 0; i < 3; ++i) params.at("f.conv.bias")->value().set(i, 0.1 * i);
  cb = params.at("f.conv.bias")->value().to_vector();
  auto w = params.at("f.proj.weight")->value().to_vector();  // [3 x 2]
  auto pb = params.at("f.proj.bias")->value().to_vector();

  const std::size_t lp = 4;
  Tensor v = random_input({lp, 3}, rng);
  auto out = c.couple(v);
  for (std::size_t t = 0; t < lp; ++t) {
    std::vector<double> h(3);
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = cb[o];
      for (std::size_t i = 0; i < 3; ++i)
        for (int dt = -1; dt <= 1; ++dt) {
          const long s = static_cast<long>(t) + dt;
          if (s < 0 || s >= static_cast<long>(lp)) continue;
          acc += k[(o * 3 + i) * 3 + static_cast<std::size_t>(dt + 1)] *
                 v.at(static_cast<std::size_t>(s) * 3 + i);
        }
      h[o] = acc;
    }
    for (std::size_t j = 0; j < 2; ++j) {
      double y = pb[j];
      for (std::size_t o = 0; o < 3; ++o) y += h[o] * w[o * 2 + j];
      CHECK(out.at(t * 2 + j) == doctest::Approx(y).epsilon(1e-12));
    }
  }
}

TEST_CASE("coupling: gradients pass the finite-difference check in both modes") {
  Rng rng(10);
  for (auto mode : {CouplingMode::kLinear, CouplingMode::kConv1d}) {
    Coupling c("f", 5, 4, mode, rng, DType::kF64);
    ParameterList ps;
    c.collect(ps);
    Tensor v = random_input({6, 5}, rng);
    v.set_requires_grad(true);
    std::vector<Tensor> leaves{v};
    for (auto* p : ps) leaves.push_back(p->value());
    Tensor w = random_input({6, 4}, rng);
    auto r = check_gradients([&] { return sum(mul(tanh(c.couple(v)), w)); }, leaves, 1e-5);
    INFO(r.worst);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("fusion: alpha zero, negative alpha and shapes") {
  Rng rng(11);
  BranchFusion f("fuse", 6, 8, 16, rng, DType::kF64);
  Linear wv("wv", 8, 8, rng, DType::kF64, false);
  Tensor v = random_input({5, 6}, rng), vp = random_input({5, 6}, rng);
  Tensor proj = random_input({5, 8}, rng);
  Tensor x = random_input({3, 8}, rng), xp = random_input({3, 8}, rng);
  auto ctx = ForwardContext::eval();

  auto zero = f.fuse(v, vp, proj, x, xp, wv, 0.0, ctx);
  CHECK(zero.text.to_vector() == x.to_vector());
  auto small = f.fuse(v, vp, proj, x, xp, wv, 0.1, ctx);
  CHECK(zero.visual.shape() == Shape{5, 8});
  auto injected = wv.forward(proj);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(small.visual.at(i) ==
          doctest::Approx(zero.visual.at(i) + 0.1 * injected.at(i)).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < 24; ++i)
    CHECK(small.text.at(i) == doctest::Approx(x.at(i) + 0.1 * xp.at(i)).epsilon(1e-12));

  CHECK_THROWS_AS(f.fuse(v, vp, proj, x, xp, wv, -0.1, ctx), ConfigError);
}

TEST_CASE("dual branch: shared weights and identical inputs give identical branches") {
  Rng rng(12);
  auto cfg = tiny_dual();
  cfg.prompt.share_value_proj = true;
  DualBranchModel m(cfg, rng, DType::kF64);
  Tensor feats = random_input({5, 6}, rng);
  const std::vector<int> src{4, 5, 6, kEosId};
  auto ctx = ForwardContext::eval();
  auto d = m.encode(Branch::kReconstructed, src, feats, ctx);
  auto a = m.encode(Branch::kAuthentic, src, feats, ctx);
  CHECK(d.memory.to_vector() == a.memory.to_vector());

  Rng rng2(12);
  cfg.prompt.share_value_proj = false;
  DualBranchModel sep(cfg, rng2, DType::kF64);
  auto d2 = sep.encode(Branch::kReconstructed, src, feats, ctx);
  auto a2 = sep.encode(Branch::kAuthentic, src, feats, ctx);
  CHECK(d2.memory.to_vector() != a2.memory.to_vector());
}

TEST_CASE("dual branch: encoded length is K' + N for two configurations") {
  for (auto [k, dv, n] : {std::tuple<std::size_t, std::size_t, std::size_t>{5, 6, 4}, {8, 16, 7}}) {
    Rng rng(13);
    auto cfg = tiny_dual();
    cfg.prompt.feature_len = k;
    cfg.prompt.feature_dim = dv;
    DualBranchModel m(cfg, rng, DType::kF32);
    std::vector<int> src(n, 5);
    auto ctx = ForwardContext::eval();
    auto enc = m.encode(Branch::kReconstructed, src, random_input({k, dv}, rng, DType::kF32), ctx);
    CHECK(enc.memory.shape() == Shape{k + n, 8});
    CHECK(enc.text_len == n);
    CHECK(enc.visual_len == k);
  }
}

TEST_CASE("dual branch: ablation switches build and run") {
  const std::vector<int> src{4, 5, kEosId}, tin{kBosId, 7}, tout{7, kEosId};
  for (int variant = 0; variant < 5; ++variant) {
    auto cfg = tiny_dual();
    switch (variant) {
      case 0: cfg.prompt.use_vpg = false; break;
      case 1: cfg.prompt.use_coupling = false; break;
      case 2: cfg.prompt.independent = true; break;
      case 3: cfg.prompt.split_translator = true; break;
      case 4: cfg.prompt.coupling = CouplingMode::kConv1d; break;
    }
    Rng rng(14);
    DualBranchModel m(cfg, rng, DType::kF64);
    auto ctx = ForwardContext::eval();
    Tensor feats = random_input({5, 6}, rng);
    auto lg = m.logits(Branch::kAuthentic, src, feats, tin, ctx);
    CHECK(lg.shape() == Shape{2, 12});
    if (variant == 0) {
      auto set = m.prompts(feats, m.translator(Branch::kReconstructed).embed(src, ctx));
      CHECK(set.visual_prompt.to_vector() == feats.to_vector());
    }
    if (variant == 2) {
      // The text prompt no longer depends on the visual input.
      Tensor text = m.translator(Branch::kReconstructed).embed(src, ctx);
      auto p1 = m.prompts(feats, text).text_prompt.to_vector();
      auto p2 = m.prompts(random_input({5, 6}, rng), text).text_prompt.to_vector();
      CHECK(p1 == p2);
    }
  }
  auto bad = tiny_dual();
  bad.prompt.alpha = -1.0;
  Rng rng(15);
  CHECK_THROWS_AS(DualBranchModel(bad, rng, DType::kF64), ConfigError);
}

TEST_CASE("dual branch: composed gradients pass the finite-difference check") {
  Rng rng(16);
  DualBranchModel m(tiny_dual(), rng, DType::kF64);
  ParameterList ps;
  m.collect(ps);
  std::vector<Tensor> leaves;
  for (auto* p : ps) leaves.push_back(p->value());
  Tensor feats = random_input({5, 6}, rng);
  const std::vector<int> src{4, 5, 6, kEosId}, tin{kBosId, 7, 8}, tout{7, 8, kEosId};
  auto loss = [&] {
    auto ctx = ForwardContext::eval();
    return label_smoothed_loss(m.logits(Branch::kAuthentic, src, feats, tin, ctx), tout, 0.1);
  };
  auto r = check_gradients(loss, leaves, 1e-6, 1e-6, 300, 5);
  INFO(r.worst);
  CHECK(r.max_rel_error <= 1e-3);
}
