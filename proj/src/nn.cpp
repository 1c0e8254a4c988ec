#include "d2p/nn.hpp"

#include <cmath>

namespace d2p {

Tensor xavier_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                      DType dtype) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(shape, v, dtype);
}

Linear::Linear(const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng,
               DType dtype, bool with_bias)
    : weight_(name + ".weight", xavier_uniform({d_in, d_out}, d_in, d_out, rng, dtype)) {
  if (with_bias) bias_ = Parameter(name + ".bias", Tensor::zeros({d_out}, dtype));
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight_.value());
  return has_bias() ? add(y, bias_.value()) : y;
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight_);
  if (has_bias()) out.push_back(&bias_);
}

LayerNorm::LayerNorm(const std::string& name, std::size_t d, DType dtype)
    : gain_(name + ".gain", Tensor::full({d}, 1.0, dtype)),
      bias_(name + ".bias", Tensor::zeros({d}, dtype)) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm_rows(x, gain_.value(), bias_.value());
}

void LayerNorm::collect(ParameterList& out) {
  out.push_back(&gain_);
  out.push_back(&bias_);
}

FeedForward::FeedForward(const std::string& name, std::size_t d_in, std::size_t hidden,
                         std::size_t d_out, Rng& rng, DType dtype)
    : in_(name + ".fc1", d_in, hidden, rng, dtype), out_(name + ".fc2", hidden, d_out, rng, dtype) {}

Tensor FeedForward::forward(const Tensor& x, ForwardContext& ctx) const {
  return out_.forward(ctx.drop(relu(in_.forward(x))));
}

void FeedForward::collect(ParameterList& out) {
  in_.collect(out);
  out_.collect(out);
}

EmbeddingTable::EmbeddingTable(const std::string& name, std::size_t vocab, std::size_t dim,
                               Rng& rng, DType dtype)
    : table_(name, xavier_uniform({vocab, dim}, vocab, dim, rng, dtype)) {}

Tensor EmbeddingTable::lookup(std::span<const int> ids) const {
  return embedding_lookup(table_.value(), ids);
}

void EmbeddingTable::collect(ParameterList& out) { out.push_back(&table_); }

AttentionMask AttentionMask::none(std::size_t rows, std::size_t cols) {
  return {rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m = none(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m.block(i, j);
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t rows,
                                         std::span<const std::uint8_t> key_blocked) {
  AttentionMask m = none(rows, key_blocked.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < key_blocked.size(); ++j)
      if (key_blocked[j]) m.block(i, j);
  return m;
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, std::size_t d_model,
                                       std::size_t heads, Rng& rng, DType dtype)
    : d_model_(d_model),
      heads_(heads),
      wq_(name + ".q", d_model, d_model, rng, dtype),
      wk_(name + ".k", d_model, d_model, rng, dtype),
      wv_(name + ".v", d_model, d_model, rng, dtype),
      wo_(name + ".o", d_model, d_model, rng, dtype) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  }
}

namespace {

void check_mask(const AttentionMask& mask, const Tensor& q, const Tensor& kv) {
  if (mask.rows != q.dim(0) || mask.cols != kv.dim(0) ||
      mask.blocked.size() != mask.rows * mask.cols) {
    throw ShapeError("attention mask " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + " for queries " + shape_str(q.shape()) +
                     " and keys " + shape_str(kv.shape()));
  }
}

}  // namespace

std::vector<Tensor> MultiHeadAttention::weights(const Tensor& q_in, const Tensor& kv_in,
                                                const AttentionMask& mask) const {
  check_mask(mask, q_in, kv_in);
  const std::size_t dk = d_model_ / heads_;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor q = wq_.forward(q_in);
  Tensor k = wk_.forward(kv_in);
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < heads_; ++h) {
    Tensor scores = scale(
        matmul(slice(q, 1, h * dk, dk), transpose(slice(k, 1, h * dk, dk))), inv);
    out.push_back(masked_softmax_rows(scores, mask.blocked));
  }
  return out;
}

Tensor MultiHeadAttention::attend(const Tensor& q_in, const Tensor& kv_in,
                                  const AttentionMask& mask, ForwardContext& ctx,
                                  std::vector<std::size_t>* flagged_rows) const {
  check_mask(mask, q_in, kv_in);
  if (q_in.dim(1) != d_model_ || kv_in.dim(1) != d_model_) {
    throw ShapeError("attention: inputs " + shape_str(q_in.shape()) + ", " +
                     shape_str(kv_in.shape()) + " for model dim " + std::to_string(d_model_));
  }
  const std::size_t dk = d_model_ / heads_;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor q = wq_.forward(q_in);
  Tensor k = wk_.forward(kv_in);
  Tensor v = wv_.forward(kv_in);
  std::vector<Tensor> heads;
  std::vector<std::size_t> flagged;
  for (std::size_t h = 0; h < heads_; ++h) {
    Tensor scores = scale(
        matmul(slice(q, 1, h * dk, dk), transpose(slice(k, 1, h * dk, dk))), inv);
    flagged.clear();
    Tensor w = ctx.drop(masked_softmax_rows(scores, mask.blocked, &flagged));
    heads.push_back(matmul(w, slice(v, 1, h * dk, dk)));
  }
  Tensor out = wo_.forward(heads_ == 1 ? heads[0] : concat(heads, 1));
  if (!flagged.empty()) {
    // Same rows are flagged by every head; zero them after the output bias.
    std::vector<double> keep(q_in.dim(0), 1.0);
    for (auto r : flagged) keep[r] = 0.0;
    std::vector<double> keep_full(out.numel());
    for (std::size_t r = 0; r < keep.size(); ++r)
      for (std::size_t c = 0; c < d_model_; ++c) keep_full[r * d_model_ + c] = keep[r];
    out = mul(out, Tensor::from(out.shape(), keep_full, out.dtype()));
    if (flagged_rows) flagged_rows->insert(flagged_rows->end(), flagged.begin(), flagged.end());
  }
  return out;
}

void MultiHeadAttention::collect(ParameterList& out) {
  wq_.collect(out);
  wk_.collect(out);
  wv_.collect(out);
  wo_.collect(out);
}

Tensor positional_encoding(std::size_t length, std::size_t d, DType dtype) {
  if (length == 0 || d == 0) throw ContractError("positional_encoding: empty table");
  std::vector<double> v(length * d);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      const double angle = static_cast<double>(p) / std::pow(10000.0, expo);
      v[p * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({length, d}, v, dtype);
}

TokenLoss label_smoothed_sum(const Tensor& logits, std::span<const int> targets, double eps,
                             int pad_id) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("label_smoothed_loss: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(targets.size()) + " targets");
  }
  if (eps < 0.0 || eps > 1.0) {
    throw ConfigError("label smoothing must be in [0, 1], got " + std::to_string(eps));
  }
  std::vector<double> weight(targets.size(), 0.0);
  std::vector<int> safe(targets.begin(), targets.end());
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == pad_id) {
      safe[i] = 0;
      continue;
    }
    weight[i] = 1.0;
    ++count;
  }
  if (count == 0) throw ContractError("label_smoothed_loss: every target is PAD");
  Tensor lp = log_softmax_rows(logits);
  Tensor nll = neg(pick_rows(lp, safe));
  Tensor per_row = nll;
  if (eps > 0.0) {
    per_row = add(scale(nll, 1.0 - eps), scale(neg(mean_last(lp)), eps));
  }
  Tensor w = Tensor::from({targets.size()}, weight, logits.dtype());
  return {sum(mul(per_row, w)), count};
}

Tensor label_smoothed_loss(const Tensor& logits, std::span<const int> targets, double eps,
                           int pad_id) {
  TokenLoss l = label_smoothed_sum(logits, targets, eps, pad_id);
  return scale(l.total, 1.0 / static_cast<double>(l.tokens));
}

}  // namespace d2p
