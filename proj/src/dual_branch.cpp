#include "d2p/dual_branch.hpp"

namespace d2p {

const char* branch_name(Branch b) {
  return b == Branch::kReconstructed ? "reconstructed" : "authentic";
}

Branch parse_branch(const std::string& s) {
  if (s == "reconstructed") return Branch::kReconstructed;
  if (s == "authentic") return Branch::kAuthentic;
  throw ConfigError("unknown branch '" + s + "' (expected reconstructed or authentic)");
}

void PromptConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("fusion scalar alpha must be >= 0");
  if (feature_len == 0 || feature_dim == 0) throw ConfigError("feature plane must be non-empty");
  if (stages == 0) throw ConfigError("prompt stages must be >= 1");
  if (use_vpg &&
      (feature_len < VisualPromptGenerator::kMinExtent ||
       feature_dim < VisualPromptGenerator::kMinExtent)) {
    throw ConfigError("visual prompt generator needs K >= " +
                      std::to_string(VisualPromptGenerator::kMinExtent) + " and d_v >= " +
                      std::to_string(VisualPromptGenerator::kMinExtent));
  }
}

DualBranchModel::DualBranchModel(const DualBranchConfig& config, Rng& rng, DType dtype)
    : config_(config), dtype_(dtype) {
  config_.prompt.validate();
  const auto& p = config_.prompt;
  // The fused visual rows already live in the model width.
  config_.transformer.visual_dim = config_.transformer.d;
  const std::size_t d = config_.transformer.d;

  translator_ = std::make_unique<MultimodalTransformer>(config_.transformer, rng, dtype, "mmt");
  if (p.split_translator) {
    translator_authentic_ =
        std::make_unique<MultimodalTransformer>(config_.transformer, rng, dtype, "mmt_a");
  }
  if (p.use_vpg) {
    for (std::size_t s = 0; s < p.stages; ++s) {
      vpg_.emplace_back("prompt.vpg" + std::to_string(s), p.feature_len, p.feature_dim, p.vpg,
                        rng, dtype);
    }
  }
  if (p.use_coupling) {
    coupling_ = Coupling("prompt.couple", p.feature_dim, d, p.coupling, rng, dtype);
  }
  language_ = LanguagePrompt("prompt.lang", d, rng, dtype);
  if (p.independent) {
    free_prompt_ = Parameter("prompt.free",
                             xavier_uniform({p.feature_len, d}, p.feature_len, d, rng, dtype));
  }
  fusion_ = BranchFusion("prompt.fusion", p.feature_dim, d, config_.transformer.ffn, rng, dtype);
  value_proj_reconstructed_ = Linear(p.share_value_proj ? "prompt.wv" : "prompt.wv_d", d, d, rng,
                                     dtype, false);
  if (!p.share_value_proj) {
    value_proj_authentic_ = Linear("prompt.wv_a", d, d, rng, dtype, false);
  }
}

Tensor DualBranchModel::visual_prompt(const Tensor& features) const {
  if (vpg_.empty()) return features;
  const std::size_t k = features.dim(0), dv = features.dim(1);
  Tensor input = reshape(features, {1, k, dv});
  Tensor out;
  for (std::size_t s = 0; s < vpg_.size(); ++s) {
    out = vpg_[s].generate(input);
    if (s + 1 < vpg_.size()) input = add(input, out);
  }
  return reshape(out, {k, dv});
}

Tensor DualBranchModel::project(const Tensor& vp) const {
  if (!config_.prompt.use_coupling) return Coupling::identity_pad(vp, config_.transformer.d);
  return coupling_.couple(vp);
}

PromptSet DualBranchModel::prompts(const Tensor& features, const Tensor& text) const {
  const auto& p = config_.prompt;
  if (features.rank() != 2 || features.dim(0) != p.feature_len ||
      features.dim(1) != p.feature_dim) {
    throw ShapeError("features " + shape_str(features.shape()) + ", expected [" +
                     std::to_string(p.feature_len) + " x " + std::to_string(p.feature_dim) + "]");
  }
  PromptSet set;
  set.visual_prompt = visual_prompt(features);
  set.projected_prompt = project(set.visual_prompt);
  set.text_prompt = language_.attend(text, p.independent ? free_prompt_.value()
                                                         : set.projected_prompt);
  return set;
}

const MultimodalTransformer& DualBranchModel::translator(Branch branch) const {
  if (branch == Branch::kAuthentic && translator_authentic_) return *translator_authentic_;
  return *translator_;
}

MultimodalTransformer& DualBranchModel::translator(Branch branch) {
  if (branch == Branch::kAuthentic && translator_authentic_) return *translator_authentic_;
  return *translator_;
}

Linear& DualBranchModel::value_projection(Branch branch) {
  if (branch == Branch::kAuthentic && !config_.prompt.share_value_proj) {
    return value_proj_authentic_;
  }
  return value_proj_reconstructed_;
}

SourceEncoding DualBranchModel::encode(Branch branch, std::span<const int> src_ids,
                                       const Tensor& features, ForwardContext& ctx) const {
  const auto& mt = translator(branch);
  Tensor text = mt.embed(src_ids, ctx);
  if (!features.defined()) return mt.encode(text, Tensor(), ctx);
  PromptSet set = prompts(features, text);
  const Linear& wv = (branch == Branch::kAuthentic && !config_.prompt.share_value_proj)
                         ? value_proj_authentic_
                         : value_proj_reconstructed_;
  FusedInput in = fusion_.fuse(features, set.visual_prompt, set.projected_prompt, text,
                               set.text_prompt, wv, config_.prompt.alpha, ctx);
  return mt.encode(in.text, in.visual, ctx);
}

Tensor DualBranchModel::logits(Branch branch, std::span<const int> src_ids,
                               const Tensor& features, std::span<const int> target_in,
                               ForwardContext& ctx) const {
  SourceEncoding enc = encode(branch, src_ids, features, ctx);
  return translator(branch).decode(enc, target_in, ctx);
}

std::vector<double> DualBranchModel::decode_step(Branch branch, const DecodeState& state,
                                                 const SourceEncoding& source) const {
  return translator(branch).decode_step(state, source);
}

void DualBranchModel::collect(ParameterList& out) {
  translator_->collect(out);
  if (translator_authentic_) translator_authentic_->collect(out);
  for (auto& v : vpg_) v.collect(out);
  if (config_.prompt.use_coupling) coupling_.collect(out);
  language_.collect(out);
  if (config_.prompt.independent) out.push_back(&free_prompt_);
  fusion_.collect(out);
  value_proj_reconstructed_.collect(out);
  if (!config_.prompt.share_value_proj) value_proj_authentic_.collect(out);
}

}  // namespace d2p
