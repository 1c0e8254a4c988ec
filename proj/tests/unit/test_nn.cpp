#include <cmath>
#include <set>

#include "d2p/gradcheck.hpp"
#include "d2p/nn.hpp"
#include "doctest.h"

using namespace d2p;

namespace {

Tensor random_input(const Shape& shape, Rng& rng, DType dtype = DType::kF64) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(shape, v, dtype);
}

std::vector<Tensor> values_of(ParameterList& params) {
  std::vector<Tensor> out;
  for (auto* p : params) out.push_back(p->value());
  return out;
}

void set_identity(Linear& l) {
  auto w = l.weight().value();
  for (std::size_t i = 0; i < w.numel(); ++i) w.set(i, 0.0);
  for (std::size_t i = 0; i < l.d_in(); ++i) w.set(i * l.d_out() + i, 1.0);
}

}  // namespace

TEST_CASE("attend: single unmasked key returns its value projection") {
  Rng rng(1);
  MultiHeadAttention mha("a", 8, 2, rng, DType::kF64);
  auto ctx = ForwardContext::eval();
  Tensor q = random_input({3, 8}, rng);
  Tensor kv = random_input({1, 8}, rng);
  Tensor out = mha.attend(q, kv, AttentionMask::none(3, 1), ctx);
  Tensor expect = mha.output().forward(mha.value().forward(kv));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(out.at(r * 8 + c) == doctest::Approx(expect.at(c)).epsilon(1e-12));
}

TEST_CASE("attend: identical keys and values make output independent of the query") {
  Rng rng(2);
  MultiHeadAttention mha("a", 8, 4, rng, DType::kF64);
  auto ctx = ForwardContext::eval();
  Tensor row = random_input({1, 8}, rng);
  Tensor kv = concat({row, row, row, row}, 0);
  Tensor out1 = mha.attend(random_input({2, 8}, rng), kv, AttentionMask::none(2, 4), ctx);
  Tensor out2 = mha.attend(random_input({2, 8}, rng), kv, AttentionMask::none(2, 4), ctx);
  for (std::size_t i = 0; i < out1.numel(); ++i)
    CHECK(out1.at(i) == doctest::Approx(out2.at(i)).epsilon(1e-12));
}

TEST_CASE("attend: two-token case matches a scalar hand computation") {
  Rng rng(3);
  MultiHeadAttention mha("a", 2, 1, rng, DType::kF64);
  set_identity(mha.query());
  set_identity(mha.key());
  set_identity(mha.value());
  set_identity(mha.output());
  auto ctx = ForwardContext::eval();
  Tensor q = Tensor::from({1, 2}, {1.0, 0.5}, DType::kF64);
  Tensor kv = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 2.0}, DType::kF64);
  // scores: q.k1 / sqrt(2) = 1/sqrt2, q.k2 / sqrt(2) = 1/sqrt2
  const double s1 = 1.0 / std::sqrt(2.0), s2 = 1.0 / std::sqrt(2.0);
  const double w1 = std::exp(s1) / (std::exp(s1) + std::exp(s2));
  const double w2 = 1.0 - w1;
  Tensor out = mha.attend(q, kv, AttentionMask::none(1, 2), ctx);
  CHECK(out.at(0) == doctest::Approx(w1 * 1.0 + w2 * 0.0).epsilon(1e-12));
  CHECK(out.at(1) == doctest::Approx(w1 * 0.0 + w2 * 2.0).epsilon(1e-12));

  Tensor q2 = Tensor::from({1, 2}, {2.0, -1.0}, DType::kF64);
  const double t1 = 2.0 / std::sqrt(2.0), t2 = -2.0 / std::sqrt(2.0);
  const double v1 = std::exp(t1) / (std::exp(t1) + std::exp(t2));
  Tensor out2 = mha.attend(q2, kv, AttentionMask::none(1, 2), ctx);
  CHECK(out2.at(0) == doctest::Approx(v1).epsilon(1e-12));
  CHECK(out2.at(1) == doctest::Approx((1 - v1) * 2.0).epsilon(1e-12));
}

TEST_CASE("attention rows are stochastic and masked positions get zero weight") {
  Rng rng(4);
  MultiHeadAttention mha("a", 8, 4, rng, DType::kF64);
  auto mask = AttentionMask::causal(5);
  for (const auto& w : mha.weights(random_input({5, 8}, rng), random_input({5, 8}, rng), mask)) {
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        if (j > i) CHECK(w.at(i * 5 + j) == 0.0);
        s += w.at(i * 5 + j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("attend: all-masked row yields zeros and a flag") {
  Rng rng(5);
  MultiHeadAttention mha("a", 4, 2, rng, DType::kF64);
  auto ctx = ForwardContext::eval();
  std::vector<std::uint8_t> pad{0, 0, 1};
  auto mask = AttentionMask::key_padding(3, pad);
  for (std::size_t j = 0; j < 3; ++j) mask.block(2, j);
  std::vector<std::size_t> flagged;
  Tensor out = mha.attend(random_input({3, 4}, rng), random_input({3, 4}, rng), mask, ctx, &flagged);
  CHECK(flagged == std::vector<std::size_t>{2});
  for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(2 * 4 + c) == 0.0);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out.at(i)));
}

TEST_CASE("causal self-attention ignores later positions") {
  Rng rng(6);
  MultiHeadAttention mha("a", 8, 2, rng, DType::kF64);
  auto ctx = ForwardContext::eval();
  auto mask = AttentionMask::causal(4);
  Tensor x = random_input({4, 8}, rng);
  Tensor y = mha.attend(x, x, mask, ctx);
  for (std::size_t changed = 1; changed < 4; ++changed) {
    Tensor x2 = x.detach();
    for (std::size_t c = 0; c < 8; ++c) x2.set(changed * 8 + c, 5.0 + static_cast<double>(c));
    Tensor y2 = mha.attend(x2, x2, mask, ctx);
    for (std::size_t r = 0; r < changed; ++r)
      for (std::size_t c = 0; c < 8; ++c) CHECK(y2.at(r * 8 + c) == y.at(r * 8 + c));
  }
}

TEST_CASE("positional encoding") {
  auto pe = positional_encoding(4, 6, DType::kF64);
  CHECK(pe.to_vector()[0] == 0.0);
  for (std::size_t i = 0; i < 6; ++i) CHECK(pe.at(i) == (i % 2 == 0 ? 0.0 : 1.0));

  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto L = 1 + rng.below(100), d = 1 + rng.below(64);
    for (double v : positional_encoding(L, d, DType::kF64).to_vector()) CHECK(std::abs(v) <= 1.0);
  }

  // Exhaustive pairwise scan over 512 positions.
  for (std::size_t d : {2u, 3u, 8u, 16u, 128u}) {
    auto table = positional_encoding(512, d, DType::kF64).to_vector();
    std::set<std::vector<double>> rows;
    for (std::size_t p = 0; p < 512; ++p)
      rows.emplace(table.begin() + p * d, table.begin() + (p + 1) * d);
    CHECK(rows.size() == 512);
  }
}

TEST_CASE("label-smoothed loss") {
  SUBCASE("eps 0 with certain target is 0") {
    Tensor logits = Tensor::from({1, 3}, {0, 100, 0}, DType::kF64);
    const int t[] = {1};
    CHECK(label_smoothed_loss(logits, t, 0.0).item() == 0.0);
  }
  SUBCASE("eps 0 uniform over 4 classes is ln 4") {
    Tensor logits = Tensor::from({2, 4}, {0, 0, 0, 0, 3, 3, 3, 3}, DType::kF64);
    const int t[] = {2, 1};
    CHECK(label_smoothed_loss(logits, t, 0.0).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("eps 0.1, V 3 hand case") {
    Tensor logits = Tensor::from({1, 3}, {1.0, 2.0, 0.5}, DType::kF64);
    const int t[] = {1};
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
    const double nll[] = {-std::log(std::exp(1.0) / z), -std::log(std::exp(2.0) / z),
                          -std::log(std::exp(0.5) / z)};
    const double expect = 0.9 * nll[1] + 0.1 * (nll[0] + nll[1] + nll[2]) / 3.0;
    CHECK(label_smoothed_loss(logits, t, 0.1).item() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("PAD rows are excluded; all-PAD is an error") {
    Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 0.5, 9, -9, 4}, DType::kF64);
    const int t1[] = {1, kPadId};
    Tensor one = Tensor::from({1, 3}, {1.0, 2.0, 0.5}, DType::kF64);
    const int t2[] = {1};
    CHECK(label_smoothed_loss(logits, t1, 0.1).item() ==
          doctest::Approx(label_smoothed_loss(one, t2, 0.1).item()).epsilon(1e-14));
    const int t3[] = {kPadId, kPadId};
    CHECK_THROWS_AS(label_smoothed_loss(logits, t3, 0.1), ContractError);
  }
  SUBCASE("eps 0 equals exact NLL") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor logits = random_input({5, 7}, rng, DType::kF32);
      std::vector<int> t(5);
      double nll = 0;
      for (int i = 0; i < 5; ++i) {
        t[i] = 4 + static_cast<int>(rng.below(3));
        double z = 0;
        for (int j = 0; j < 7; ++j) z += std::exp(logits.at(i * 7 + j));
        nll += -(logits.at(i * 7 + t[i]) - std::log(z));
      }
      CHECK(std::abs(label_smoothed_loss(logits, t, 0.0).item() - nll / 5) <= 1e-6);
      CHECK(label_smoothed_loss(logits, t, 0.1).item() >= 0.0);
    }
  }
}

TEST_CASE("layer gradients pass the finite-difference check") {
  Rng rng(10);
  auto check = [](ParameterList params, std::vector<Tensor> extra,
                  const std::function<Tensor()>& loss) {
    auto leaves = values_of(params);
    for (auto& e : extra) leaves.push_back(e);
    auto r = check_gradients(loss, leaves, 1e-5, 1e-6);
    INFO(r.worst);
    CHECK(r.max_rel_error <= 1e-4);
  };
  auto weights = [&](const Shape& s) { return random_input(s, rng); };

  SUBCASE("linear") {
    Linear lin("l", 5, 3, rng, DType::kF64);
    ParameterList ps;
    lin.collect(ps);
    auto x = random_input({4, 5}, rng);
    x.set_requires_grad(true);
    auto w = weights({4, 3});
    check(ps, {x}, [&] { return sum(mul(lin.forward(x), w)); });
  }
  SUBCASE("layer norm") {
    LayerNorm ln("n", 6, DType::kF64);
    ParameterList ps;
    ln.collect(ps);
    auto x = random_input({3, 6}, rng);
    x.set_requires_grad(true);
    auto w = weights({3, 6});
    check(ps, {x}, [&] { return sum(mul(ln.forward(x), w)); });
  }
  SUBCASE("feed-forward") {
    FeedForward ff("f", 4, 7, 4, rng, DType::kF64);
    ParameterList ps;
    ff.collect(ps);
    auto x = random_input({3, 4}, rng);
    auto w = weights({3, 4});
    check(ps, {}, [&] {
      auto ctx = ForwardContext::eval();
      return sum(mul(ff.forward(x, ctx), w));
    });
  }
  SUBCASE("multi-head attention with causal mask") {
    MultiHeadAttention mha("a", 8, 2, rng, DType::kF64);
    ParameterList ps;
    mha.collect(ps);
    auto x = random_input({4, 8}, rng);
    x.set_requires_grad(true);
    auto w = weights({4, 8});
    check(ps, {x}, [&] {
      auto ctx = ForwardContext::eval();
      return sum(mul(mha.attend(x, x, AttentionMask::causal(4), ctx), w));
    });
  }
  SUBCASE("embedding + label-smoothed loss") {
    EmbeddingTable emb("e", 6, 5, rng, DType::kF64);
    Linear proj("p", 5, 6, rng, DType::kF64);
    ParameterList ps;
    emb.collect(ps);
    proj.collect(ps);
    const int ids[] = {1, 4, 4, 2};
    const int tg[] = {4, 2, kPadId, 5};
    check(ps, {}, [&] { return label_smoothed_loss(proj.forward(emb.lookup(ids)), tg, 0.1); });
  }
}
