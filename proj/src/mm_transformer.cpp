#include "d2p/mm_transformer.hpp"

#include <cmath>

namespace d2p {

void TransformerConfig::validate() const {
  if (vocab < 5) throw ConfigError("vocab must hold the 4 specials plus one token");
  if (layers_enc == 0 || layers_dec == 0 || d == 0 || ffn == 0 || heads == 0 ||
      visual_dim == 0 || max_len == 0) {
    throw ConfigError("transformer sizes must be positive");
  }
  if (d % heads != 0) {
    throw ConfigError("model dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

MultimodalTransformer::MultimodalTransformer(const TransformerConfig& config, Rng& rng,
                                             DType dtype, const std::string& prefix)
    : config_(config), dtype_(dtype) {
  config_.validate();
  const auto d = config_.d;
  embedding_ = EmbeddingTable(prefix + ".embed", config_.vocab, d, rng, dtype);
  visual_proj_ = Linear(prefix + ".visual_proj", config_.visual_dim, d, rng, dtype, false);
  for (std::size_t l = 0; l < config_.layers_enc; ++l) {
    const std::string n = prefix + ".enc" + std::to_string(l);
    encoder_.push_back({LayerNorm(n + ".norm_attn", d, dtype), LayerNorm(n + ".norm_ffn", d, dtype),
                        MultiHeadAttention(n + ".attn", d, config_.heads, rng, dtype),
                        FeedForward(n + ".ffn", d, config_.ffn, d, rng, dtype)});
  }
  for (std::size_t l = 0; l < config_.layers_dec; ++l) {
    const std::string n = prefix + ".dec" + std::to_string(l);
    decoder_.push_back({LayerNorm(n + ".norm_self", d, dtype),
                        LayerNorm(n + ".norm_cross", d, dtype),
                        LayerNorm(n + ".norm_ffn", d, dtype),
                        MultiHeadAttention(n + ".self_attn", d, config_.heads, rng, dtype),
                        MultiHeadAttention(n + ".cross_attn", d, config_.heads, rng, dtype),
                        FeedForward(n + ".ffn", d, config_.ffn, d, rng, dtype)});
  }
  encoder_norm_ = LayerNorm(prefix + ".enc_norm", d, dtype);
  decoder_norm_ = LayerNorm(prefix + ".dec_norm", d, dtype);
  if (!config_.tie_output) {
    output_ = Linear(prefix + ".output", d, config_.vocab, rng, dtype);
  }
}

Tensor MultimodalTransformer::embed(std::span<const int> ids, ForwardContext& ctx) const {
  const double s = std::sqrt(static_cast<double>(config_.d));
  Tensor e = scale(embedding_.lookup(ids), s);
  return ctx.drop(add(e, positional_encoding(ids.size(), config_.d, dtype_)));
}

SourceEncoding MultimodalTransformer::encode(const Tensor& text, const Tensor& visual,
                                             ForwardContext& ctx) const {
  if (text.rank() != 2 || text.dim(1) != config_.d) {
    throw ShapeError("encode: text states " + shape_str(text.shape()) + ", expected [N x " +
                     std::to_string(config_.d) + "]");
  }
  const std::size_t n = text.dim(0);
  std::size_t k = 0;
  Tensor h = text;
  if (visual.defined()) {
    if (visual.rank() != 2 || visual.dim(1) != config_.visual_dim) {
      throw ShapeError("encode: visual states " + shape_str(visual.shape()) +
                       ", expected [K x " + std::to_string(config_.visual_dim) + "]");
    }
    k = visual.dim(0);
    h = concat({text, visual_proj_.forward(visual)}, 0);
  }
  const std::size_t kv_len = config_.visual_keys ? n + k : n;
  const auto mask = AttentionMask::none(n + k, kv_len);
  for (const auto& layer : encoder_) {
    Tensor x = layer.norm_attn.forward(h);
    Tensor kv = kv_len == n + k ? x : slice(x, 0, 0, n);
    h = add(h, ctx.drop(layer.attn.attend(x, kv, mask, ctx)));
    h = add(h, ctx.drop(layer.ffn.forward(layer.norm_ffn.forward(h), ctx)));
  }
  return {encoder_norm_.forward(h), n, k};
}

Tensor MultimodalTransformer::project(const Tensor& h) const {
  if (config_.tie_output) return matmul(h, transpose(embedding_.table().value()));
  return output_.forward(h);
}

Tensor MultimodalTransformer::decode(const SourceEncoding& source,
                                     std::span<const int> target_in,
                                     ForwardContext& ctx) const {
  if (target_in.empty()) throw ContractError("decode: empty target prefix");
  const std::size_t m = target_in.size();
  Tensor memory = source.memory;
  if (config_.text_only_memory && source.visual_len > 0) {
    memory = slice(memory, 0, 0, source.text_len);
  }
  const auto self_mask = AttentionMask::causal(m);
  const auto cross_mask = AttentionMask::none(m, memory.dim(0));
  Tensor h = embed(target_in, ctx);
  for (const auto& layer : decoder_) {
    Tensor x = layer.norm_self.forward(h);
    h = add(h, ctx.drop(layer.self_attn.attend(x, x, self_mask, ctx)));
    h = add(h, ctx.drop(layer.cross_attn.attend(layer.norm_cross.forward(h), memory,
                                                cross_mask, ctx)));
    h = add(h, ctx.drop(layer.ffn.forward(layer.norm_ffn.forward(h), ctx)));
  }
  return project(decoder_norm_.forward(h));
}

std::vector<double> MultimodalTransformer::decode_step(const DecodeState& state,
                                                       const SourceEncoding& source) const {
  if (state.prefix.empty()) throw ContractError("decode_step: empty prefix");
  if (state.prefix.size() > config_.max_len) {
    throw ContractError("decode_step: prefix length " + std::to_string(state.prefix.size()) +
                        " exceeds max_len " + std::to_string(config_.max_len));
  }
  NoGradGuard no_grad;
  auto ctx = ForwardContext::eval();
  Tensor logits = decode(source, state.prefix, ctx);
  const std::size_t last = state.prefix.size() - 1;
  Tensor lp = log_softmax_rows(slice(logits, 0, last, 1));
  return lp.to_vector();
}

void MultimodalTransformer::collect(ParameterList& out) {
  embedding_.collect(out);
  visual_proj_.collect(out);
  for (auto& l : encoder_) {
    l.norm_attn.collect(out);
    l.attn.collect(out);
    l.norm_ffn.collect(out);
    l.ffn.collect(out);
  }
  encoder_norm_.collect(out);
  for (auto& l : decoder_) {
    l.norm_self.collect(out);
    l.self_attn.collect(out);
    l.norm_cross.collect(out);
    l.cross_attn.collect(out);
    l.norm_ffn.collect(out);
    l.ffn.collect(out);
  }
  decoder_norm_.collect(out);
  if (!config_.tie_output) output_.collect(out);
}

}  // namespace d2p
