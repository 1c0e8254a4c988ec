#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "d2p/nn.hpp"

namespace d2p {

struct TransformerConfig {
  std::size_t vocab = 0;
  std::size_t layers_enc = 4;
  std::size_t layers_dec = 4;
  std::size_t d = 128;
  std::size_t ffn = 256;
  std::size_t heads = 4;
  double dropout = 0.3;
  std::size_t visual_dim = 128;  // width of visual rows entering the joint query (W^i input)
  std::size_t max_len = 256;     // longest target prefix accepted by decode_step
  bool tie_output = false;       // output projection shares the embedding table
  bool text_only_memory = false; // decoder cross-attends to text rows only
  bool visual_keys = false;      // encoder keys/values include visual rows

  void validate() const;
};

struct SourceEncoding {
  Tensor memory;           // [(N + K) x d]
  std::size_t text_len = 0;
  std::size_t visual_len = 0;
};

struct DecodeState {
  std::vector<int> prefix{kBosId};
  std::size_t step() const { return prefix.size() - 1; }
};

// Encoder whose queries are the joint text+visual sequence and whose keys
// and values are the text positions, plus a standard causal decoder.
class MultimodalTransformer {
 public:
  MultimodalTransformer(const TransformerConfig& config, Rng& rng, DType dtype,
                        const std::string& prefix = "mmt");

  const TransformerConfig& config() const { return config_; }

  // sqrt(d)-scaled token embeddings plus sinusoidal positions, then dropout.
  Tensor embed(std::span<const int> ids, ForwardContext& ctx) const;

  // text: [N x d]; visual: [K x visual_dim] or undefined for K = 0.
  SourceEncoding encode(const Tensor& text, const Tensor& visual, ForwardContext& ctx) const;

  // Logits [M x V] for every position of `target_in` (BOS-prefixed).
  Tensor decode(const SourceEncoding& source, std::span<const int> target_in,
                ForwardContext& ctx) const;

  // Log-probabilities [V] of the next token after state.prefix.
  std::vector<double> decode_step(const DecodeState& state, const SourceEncoding& source) const;

  void collect(ParameterList& out);
  EmbeddingTable& embedding() { return embedding_; }
  Linear& visual_projection() { return visual_proj_; }

 private:
  struct EncoderLayer {
    LayerNorm norm_attn, norm_ffn;
    MultiHeadAttention attn;
    FeedForward ffn;
  };
  struct DecoderLayer {
    LayerNorm norm_self, norm_cross, norm_ffn;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;
  };

  Tensor project(const Tensor& h) const;

  TransformerConfig config_;
  DType dtype_;
  EmbeddingTable embedding_;
  Linear visual_proj_;  // W^i, no bias
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNorm encoder_norm_, decoder_norm_;
  Linear output_;
};

}  // namespace d2p
