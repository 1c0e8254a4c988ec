#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2p/mm_transformer.hpp"
#include "d2p/prompt.hpp"

namespace d2p {

enum class Branch { kReconstructed, kAuthentic };

const char* branch_name(Branch b);
Branch parse_branch(const std::string& s);

struct PromptConfig {
  std::size_t feature_len = 8;   // K, rows of the visual feature plane
  std::size_t feature_dim = 16;  // d_v
  std::size_t stages = 1;        // chained VPG blocks
  VisualPromptGenerator::Options vpg;
  CouplingMode coupling = CouplingMode::kLinear;
  double alpha = 0.1;            // fusion scalar
  bool use_vpg = true;           // false: V_p = V
  bool use_coupling = true;      // false: F is identity with zero-pad/truncate
  bool independent = false;      // X_p from a free learned table, not from V_p
  bool share_value_proj = false; // one W_v for both branches
  bool split_translator = false; // one transformer per branch

  void validate() const;
};

struct DualBranchConfig {
  TransformerConfig transformer;
  PromptConfig prompt;
};

struct PromptSet {
  Tensor visual_prompt;     // V_p [K x d_v]
  Tensor projected_prompt;  // F(V_p) [K x d]
  Tensor text_prompt;       // X_p [N x d]
};

// Two translation branches (reconstructed and authentic images) over one
// set of prompt modules. The branches differ in their visual input, their
// value projection W_v and, optionally, their translator.
class DualBranchModel {
 public:
  DualBranchModel(const DualBranchConfig& config, Rng& rng, DType dtype);

  const DualBranchConfig& config() const { return config_; }
  DType dtype() const { return dtype_; }

  // features: [K x d_v]; text: embedded source [N x d].
  PromptSet prompts(const Tensor& features, const Tensor& text) const;

  // Embeds `src_ids`, builds the prompts and encodes the fused input. An
  // undefined `features` tensor encodes the text alone.
  SourceEncoding encode(Branch branch, std::span<const int> src_ids, const Tensor& features,
                        ForwardContext& ctx) const;

  // Teacher-forced logits [M x V].
  Tensor logits(Branch branch, std::span<const int> src_ids, const Tensor& features,
                std::span<const int> target_in, ForwardContext& ctx) const;

  std::vector<double> decode_step(Branch branch, const DecodeState& state,
                                  const SourceEncoding& source) const;

  const MultimodalTransformer& translator(Branch branch) const;
  MultimodalTransformer& translator(Branch branch);

  void collect(ParameterList& out);
  VisualPromptGenerator& vpg(std::size_t stage = 0) { return vpg_.at(stage); }
  Coupling& coupling() { return coupling_; }
  LanguagePrompt& language_prompt() { return language_; }
  Linear& value_projection(Branch branch);

 private:
  Tensor visual_prompt(const Tensor& features) const;
  Tensor project(const Tensor& visual_prompt) const;

  DualBranchConfig config_;
  DType dtype_;
  std::unique_ptr<MultimodalTransformer> translator_;
  std::unique_ptr<MultimodalTransformer> translator_authentic_;
  std::vector<VisualPromptGenerator> vpg_;
  Coupling coupling_;
  LanguagePrompt language_;
  Parameter free_prompt_;  // [K x d], independent prompting only
  BranchFusion fusion_;
  Linear value_proj_reconstructed_, value_proj_authentic_;
};

}  // namespace d2p
