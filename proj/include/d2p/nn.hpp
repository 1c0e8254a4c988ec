#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "d2p/ops.hpp"
#include "d2p/rng.hpp"
#include "d2p/tensor.hpp"
#include "d2p/tokens.hpp"

namespace d2p {

// Per-forward-pass state: train/eval mode and the seed stream for dropout.
// Every dropout call draws the next seed, so a pass is reproducible from
// (seed, call order) alone.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  static ForwardContext eval() { return {}; }
  static ForwardContext train(double p, std::uint64_t seed) { return {true, p, seed, 0}; }

  std::uint64_t next_seed() { return seed_combine(seed, counter++); }
  Tensor drop(const Tensor& x) { return d2p::dropout(x, dropout, training, next_seed()); }
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                      DType dtype);

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng, DType dtype,
         bool with_bias = true);

  // [L x d_in] -> [L x d_out]
  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out);

  std::size_t d_in() const { return weight_.shape()[0]; }
  std::size_t d_out() const { return weight_.shape()[1]; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  bool has_bias() const { return bias_.value().defined(); }

 private:
  Parameter weight_;  // [d_in x d_out]
  Parameter bias_;    // [d_out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t d, DType dtype);
  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out);

 private:
  Parameter gain_;
  Parameter bias_;
};

// Position-wise two-layer ReLU network.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, std::size_t d_in, std::size_t hidden, std::size_t d_out,
              Rng& rng, DType dtype);
  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  void collect(ParameterList& out);

 private:
  Linear in_;
  Linear out_;
};

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(const std::string& name, std::size_t vocab, std::size_t dim, Rng& rng,
                 DType dtype);
  Tensor lookup(std::span<const int> ids) const;
  void collect(ParameterList& out);
  std::size_t vocab_size() const { return table_.shape()[0]; }
  std::size_t dim() const { return table_.shape()[1]; }
  Parameter& table() { return table_; }
  const Parameter& table() const { return table_; }

 private:
  Parameter table_;  // [vocab x dim]
};

// Blocked positions for attention scores, row-major [rows x cols].
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> blocked;

  static AttentionMask none(std::size_t rows, std::size_t cols);
  // Query i may see keys 0..i.
  static AttentionMask causal(std::size_t n);
  // Blocks whole key columns (e.g. padding).
  static AttentionMask key_padding(std::size_t rows, std::span<const std::uint8_t> key_blocked);

  void block(std::size_t r, std::size_t c) { blocked[r * cols + c] = 1; }
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t d_model, std::size_t heads, Rng& rng,
                     DType dtype);

  // Queries from q_in [Lq x d], keys and values from kv_in [Lk x d]. Rows
  // whose keys are all blocked yield a zero output row and are reported in
  // `flagged_rows` (query indices).
  Tensor attend(const Tensor& q_in, const Tensor& kv_in, const AttentionMask& mask,
                ForwardContext& ctx, std::vector<std::size_t>* flagged_rows = nullptr) const;

  // Per-head attention weights [Lq x Lk], for inspection and tests.
  std::vector<Tensor> weights(const Tensor& q_in, const Tensor& kv_in,
                              const AttentionMask& mask) const;

  void collect(ParameterList& out);
  std::size_t heads() const { return heads_; }
  std::size_t d_model() const { return d_model_; }
  Linear& query() { return wq_; }
  Linear& key() { return wk_; }
  Linear& value() { return wv_; }
  Linear& output() { return wo_; }

 private:
  std::size_t d_model_ = 0;
  std::size_t heads_ = 1;
  Linear wq_, wk_, wv_, wo_;
};

// Sinusoidal table: pe[p, 2i] = sin(p / 10000^(2i/d)), pe[p, 2i+1] = cos(...).
Tensor positional_encoding(std::size_t length, std::size_t d, DType dtype = DType::kF32);

struct TokenLoss {
  Tensor total;       // sum over counted tokens
  std::size_t tokens = 0;
};

// Sum over non-PAD rows of (1 - eps) * NLL(target) + eps * mean_j NLL(j).
TokenLoss label_smoothed_sum(const Tensor& logits, std::span<const int> targets, double eps,
                             int pad_id = kPadId);
// Token mean of the above. Throws ContractError if every target is PAD.
Tensor label_smoothed_loss(const Tensor& logits, std::span<const int> targets, double eps,
                           int pad_id = kPadId);

}  // namespace d2p
