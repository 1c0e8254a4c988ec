#pragma once

#include <string>

#include "d2p/nn.hpp"

namespace d2p {

// Visual Prompt Generation block.
//
// The [L x D] feature matrix is a one-channel plane expanded to C channels by
// a 1x1 conv, then split in two halves:
//   global: 1x1 conv -> 5x5 depthwise conv -> 1x1 conv, residual with its
//           input, then a linear map over the feature axis;
//   local:  3x3 conv -> 4x4 conv -> flatten -> FC bottleneck -> reshape ->
//           3x3 conv.
// The halves are concatenated on channels and reduced to one plane by a
// final 1x1 conv, so the output has the input's [B x L x D] shape. Every
// branch conv is followed by ReLU.
class VisualPromptGenerator {
 public:
  struct Options {
    std::size_t channels = 8;       // C, even
    std::size_t bottleneck = 256;   // width of the local-branch FC
    bool use_global = true;         // false: global path reduces to Linear(x1)
    bool use_local = true;          // false: local path passes x2 through
  };

  static constexpr std::size_t kMinExtent = 5;

  VisualPromptGenerator() = default;
  VisualPromptGenerator(const std::string& name, std::size_t length, std::size_t dim,
                        const Options& options, Rng& rng, DType dtype);

  // features: [B x L x D] -> [B x L x D]
  Tensor generate(const Tensor& features) const;
  void collect(ParameterList& out);

  // Final convolutions of both branches and the channel reduction.
  std::vector<Parameter*> final_convs();
  const Options& options() const { return options_; }
  void set_options(const Options& o) { options_.use_global = o.use_global; options_.use_local = o.use_local; }

 private:
  struct Conv {
    Parameter kernel;
    Parameter bias;
    Conv2dOptions geometry;
  };
  static Conv make_conv(const std::string& name, std::size_t cout, std::size_t cin_per_group,
                        std::size_t kh, std::size_t kw, const Conv2dOptions& geo, Rng& rng,
                        DType dtype);
  static Tensor apply(const Conv& c, const Tensor& x) {
    return conv2d(x, c.kernel.value(), c.bias.value(), c.geometry);
  }

  std::size_t length_ = 0, dim_ = 0;
  Options options_;
  Conv expand_;
  Conv global_in_, global_depthwise_, global_out_;
  Linear global_linear_;
  Conv local_3x3_, local_4x4_, local_out_;
  Linear local_fc_in_, local_fc_out_;
  Conv reduce_;
};

enum class CouplingMode { kLinear, kConv1d };

// F(.): maps visual prompts [L_p x d_v] into the language width d_l.
class Coupling {
 public:
  Coupling() = default;
  Coupling(const std::string& name, std::size_t d_v, std::size_t d_l, CouplingMode mode, Rng& rng,
           DType dtype);

  Tensor couple(const Tensor& visual_prompt) const;
  // Coupling removed: zero-pad (or truncate) the feature axis to d_l.
  static Tensor identity_pad(const Tensor& visual_prompt, std::size_t d_l);

  void collect(ParameterList& out);
  CouplingMode mode() const { return mode_; }
  Linear& projection() { return proj_; }
  std::size_t d_v() const { return d_v_; }
  std::size_t d_l() const { return d_l_; }

 private:
  std::size_t d_v_ = 0, d_l_ = 0;
  CouplingMode mode_ = CouplingMode::kLinear;
  Parameter conv_kernel_;  // [d_v x d_v x 1 x 3]
  Parameter conv_bias_;
  Linear proj_;            // W_proj, b_proj
};

// Text tokens query the projected visual prompt:
//   weights = softmax(X W_Q (V W_K)^T / sqrt(d)),  X_p = weights (V W_V).
class LanguagePrompt {
 public:
  LanguagePrompt() = default;
  LanguagePrompt(const std::string& name, std::size_t d, Rng& rng, DType dtype);

  Tensor attend(const Tensor& text, const Tensor& projected_prompt) const;
  Tensor weights(const Tensor& text, const Tensor& projected_prompt) const;
  void collect(ParameterList& out);
  Linear& query() { return wq_; }
  Linear& key() { return wk_; }
  Linear& value() { return wv_; }

 private:
  void check(const Tensor& text, const Tensor& projected_prompt) const;
  std::size_t d_ = 0;
  Linear wq_, wk_, wv_;
};

struct FusedInput {
  Tensor text;    // X_hat = X + alpha * X_p, [N x d]
  Tensor visual;  // Z = FFN(V (+) V_p) + alpha * F(V_p) W_v, [K x d]
};

// Combines raw visual features, the visual prompt and the text prompt into
// the encoder input of one branch.
class BranchFusion {
 public:
  BranchFusion() = default;
  BranchFusion(const std::string& name, std::size_t d_v, std::size_t d, std::size_t hidden,
               Rng& rng, DType dtype);

  // visual, visual_prompt: [K x d_v]; projected_prompt: [K x d_l];
  // text, text_prompt: [N x d]; value_proj: the branch's W_v (d_l -> d).
  FusedInput fuse(const Tensor& visual, const Tensor& visual_prompt,
                  const Tensor& projected_prompt, const Tensor& text, const Tensor& text_prompt,
                  const Linear& value_proj, double alpha, ForwardContext& ctx) const;
  void collect(ParameterList& out);

 private:
  FeedForward ffn_;
};

}  // namespace d2p
