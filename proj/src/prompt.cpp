#include "d2p/prompt.hpp"

#include <cmath>

namespace d2p {

namespace {

Conv2dOptions padded(std::size_t top, std::size_t bottom, std::size_t left, std::size_t right,
                     std::size_t groups = 1) {
  Conv2dOptions o;
  o.pad_top = top;
  o.pad_bottom = bottom;
  o.pad_left = left;
  o.pad_right = right;
  o.groups = groups;
  return o;
}

// Applies `lin` to the last axis of a rank-4 tensor.
Tensor linear_last_axis(const Linear& lin, const Tensor& x) {
  const Shape& s = x.shape();
  Tensor flat = reshape(x, {s[0] * s[1] * s[2], s[3]});
  return reshape(lin.forward(flat), {s[0], s[1], s[2], lin.d_out()});
}

}  // namespace

// ---------------------------------------------------------------------------
// VisualPromptGenerator

VisualPromptGenerator::Conv VisualPromptGenerator::make_conv(
    const std::string& name, std::size_t cout, std::size_t cin_per_group, std::size_t kh,
    std::size_t kw, const Conv2dOptions& geo, Rng& rng, DType dtype) {
  const std::size_t fan_in = cin_per_group * kh * kw;
  const std::size_t fan_out = cout * kh * kw;
  return {Parameter(name + ".weight",
                    xavier_uniform({cout, cin_per_group, kh, kw}, fan_in, fan_out, rng, dtype)),
          Parameter(name + ".bias", Tensor::zeros({cout}, dtype)), geo};
}

VisualPromptGenerator::VisualPromptGenerator(const std::string& name, std::size_t length,
                                             std::size_t dim, const Options& options, Rng& rng,
                                             DType dtype)
    : length_(length), dim_(dim), options_(options) {
  if (length < kMinExtent || dim < kMinExtent) {
    throw ConfigError("visual prompt generator needs L >= " + std::to_string(kMinExtent) +
                      " and D >= " + std::to_string(kMinExtent) + ", got L = " +
                      std::to_string(length) + ", D = " + std::to_string(dim));
  }
  const std::size_t c = options.channels;
  if (c < 2 || c % 2 != 0) throw ConfigError("prompt channel width must be even and >= 2");
  if (options.bottleneck == 0) throw ConfigError("prompt bottleneck must be positive");
  const std::size_t h = c / 2;

  expand_ = make_conv(name + ".expand", c, 1, 1, 1, {}, rng, dtype);
  global_in_ = make_conv(name + ".global.in", h, h, 1, 1, {}, rng, dtype);
  global_depthwise_ =
      make_conv(name + ".global.depthwise", h, 1, 5, 5, padded(2, 2, 2, 2, h), rng, dtype);
  global_out_ = make_conv(name + ".global.out", h, h, 1, 1, {}, rng, dtype);
  global_linear_ = Linear(name + ".global.linear", dim, dim, rng, dtype);

  local_3x3_ = make_conv(name + ".local.conv3", h, h, 3, 3, padded(1, 1, 1, 1), rng, dtype);
  local_4x4_ = make_conv(name + ".local.conv4", h, h, 4, 4, padded(1, 2, 1, 2), rng, dtype);
  const std::size_t flat = h * length * dim;
  local_fc_in_ = Linear(name + ".local.fc1", flat, options.bottleneck, rng, dtype);
  local_fc_out_ = Linear(name + ".local.fc2", options.bottleneck, flat, rng, dtype);
  local_out_ = make_conv(name + ".local.out", h, h, 3, 3, padded(1, 1, 1, 1), rng, dtype);

  reduce_ = make_conv(name + ".reduce", 1, c, 1, 1, {}, rng, dtype);
}

Tensor VisualPromptGenerator::generate(const Tensor& features) const {
  if (features.rank() != 3) {
    throw ShapeError("visual prompt: expected [B x L x D], got " + shape_str(features.shape()));
  }
  const std::size_t b = features.dim(0), l = features.dim(1), d = features.dim(2);
  if (l < kMinExtent || d < kMinExtent) {
    throw ConfigError("visual prompt generator needs L >= " + std::to_string(kMinExtent) +
                      " and D >= " + std::to_string(kMinExtent) + ", got " +
                      shape_str(features.shape()));
  }
  if (l != length_ || d != dim_) {
    throw ShapeError("visual prompt: generator built for L = " + std::to_string(length_) +
                     ", D = " + std::to_string(dim_) + ", got " + shape_str(features.shape()));
  }
  const std::size_t h = options_.channels / 2;

  Tensor x = relu(apply(expand_, reshape(features, {b, 1, l, d})));
  Tensor x1 = slice(x, 1, 0, h);
  Tensor x2 = slice(x, 1, h, h);

  Tensor global_path;
  if (options_.use_global) {
    Tensor g = relu(apply(global_in_, x1));
    g = relu(apply(global_depthwise_, g));
    g = relu(apply(global_out_, g));
    global_path = linear_last_axis(global_linear_, add(g, x1));
  } else {
    global_path = linear_last_axis(global_linear_, x1);
  }

  Tensor local_path = x2;
  if (options_.use_local) {
    Tensor t = relu(apply(local_3x3_, x2));
    t = relu(apply(local_4x4_, t));
    t = reshape(t, {b, h * l * d});
    t = local_fc_out_.forward(relu(local_fc_in_.forward(t)));
    local_path = relu(apply(local_out_, reshape(t, {b, h, l, d})));
  }

  Tensor merged = concat({global_path, local_path}, 1);
  return reshape(apply(reduce_, merged), {b, l, d});
}

void VisualPromptGenerator::collect(ParameterList& out) {
  // Disabled paths are still built so every variant draws the same init
  // stream, but they are not trained or saved.
  auto conv = [&](Conv& c) {
    out.push_back(&c.kernel);
    out.push_back(&c.bias);
  };
  conv(expand_);
  if (options_.use_global) {
    for (Conv* c : {&global_in_, &global_depthwise_, &global_out_}) conv(*c);
  }
  global_linear_.collect(out);
  if (options_.use_local) {
    for (Conv* c : {&local_3x3_, &local_4x4_}) conv(*c);
    local_fc_in_.collect(out);
    local_fc_out_.collect(out);
    conv(local_out_);
  }
  conv(reduce_);
}

std::vector<Parameter*> VisualPromptGenerator::final_convs() {
  std::vector<Parameter*> out;
  if (options_.use_global) out.insert(out.end(), {&global_out_.kernel, &global_out_.bias});
  if (options_.use_local) out.insert(out.end(), {&local_out_.kernel, &local_out_.bias});
  out.insert(out.end(), {&reduce_.kernel, &reduce_.bias});
  return out;
}

// ---------------------------------------------------------------------------
// Coupling

Coupling::Coupling(const std::string& name, std::size_t d_v, std::size_t d_l, CouplingMode mode,
                   Rng& rng, DType dtype)
    : d_v_(d_v), d_l_(d_l), mode_(mode) {
  if (d_v == 0 || d_l == 0) throw ConfigError("coupling dimensions must be positive");
  if (mode == CouplingMode::kConv1d) {
    conv_kernel_ = Parameter(name + ".conv.weight",
                             xavier_uniform({d_v, d_v, 1, 3}, 3 * d_v, 3 * d_v, rng, dtype));
    conv_bias_ = Parameter(name + ".conv.bias", Tensor::zeros({d_v}, dtype));
  }
  proj_ = Linear(name + ".proj", d_v, d_l, rng, dtype);
}

Tensor Coupling::couple(const Tensor& visual_prompt) const {
  if (visual_prompt.rank() != 2 || visual_prompt.dim(1) != d_v_) {
    throw ConfigError("coupling: expected [L_p x " + std::to_string(d_v_) + "] prompt, got " +
                      shape_str(visual_prompt.shape()));
  }
  Tensor v = visual_prompt;
  if (mode_ == CouplingMode::kConv1d) {
    // Channels are the d_v features, the sequence runs along the width.
    const std::size_t lp = v.dim(0);
    Tensor plane = reshape(transpose(v), {1, d_v_, 1, lp});
    Tensor y = conv2d(plane, conv_kernel_.value(), conv_bias_.value(), padded(0, 0, 1, 1));
    v = transpose(reshape(y, {d_v_, lp}));
  }
  return proj_.forward(v);
}

Tensor Coupling::identity_pad(const Tensor& visual_prompt, std::size_t d_l) {
  if (visual_prompt.rank() != 2) {
    throw ShapeError("identity coupling: expected rank 2, got " +
                     shape_str(visual_prompt.shape()));
  }
  const std::size_t d_v = visual_prompt.dim(1);
  if (d_v == d_l) return visual_prompt;
  if (d_v > d_l) return slice(visual_prompt, 1, 0, d_l);
  return concat({visual_prompt,
                 Tensor::zeros({visual_prompt.dim(0), d_l - d_v}, visual_prompt.dtype())},
                1);
}

void Coupling::collect(ParameterList& out) {
  if (mode_ == CouplingMode::kConv1d) {
    out.push_back(&conv_kernel_);
    out.push_back(&conv_bias_);
  }
  proj_.collect(out);
}

// ---------------------------------------------------------------------------
// LanguagePrompt

LanguagePrompt::LanguagePrompt(const std::string& name, std::size_t d, Rng& rng, DType dtype)
    : d_(d),
      wq_(name + ".q", d, d, rng, dtype, false),
      wk_(name + ".k", d, d, rng, dtype, false),
      wv_(name + ".v", d, d, rng, dtype, false) {}

void LanguagePrompt::check(const Tensor& text, const Tensor& projected_prompt) const {
  if (!projected_prompt.defined() || projected_prompt.numel() == 0) {
    throw ContractError("language prompt: visual prompt is empty");
  }
  if (text.rank() != 2 || text.dim(1) != d_ || projected_prompt.rank() != 2 ||
      projected_prompt.dim(1) != d_) {
    throw ShapeError("language prompt: text " + shape_str(text.shape()) + " and prompt " +
                     shape_str(projected_prompt.shape()) + " must both have width " +
                     std::to_string(d_));
  }
}

Tensor LanguagePrompt::weights(const Tensor& text, const Tensor& projected_prompt) const {
  check(text, projected_prompt);
  Tensor scores = matmul(wq_.forward(text), transpose(wk_.forward(projected_prompt)));
  return softmax_rows(scale(scores, 1.0 / std::sqrt(static_cast<double>(d_))));
}

Tensor LanguagePrompt::attend(const Tensor& text, const Tensor& projected_prompt) const {
  return matmul(weights(text, projected_prompt), wv_.forward(projected_prompt));
}

void LanguagePrompt::collect(ParameterList& out) {
  wq_.collect(out);
  wk_.collect(out);
  wv_.collect(out);
}

// ---------------------------------------------------------------------------
// BranchFusion

BranchFusion::BranchFusion(const std::string& name, std::size_t d_v, std::size_t d,
                           std::size_t hidden, Rng& rng, DType dtype)
    : ffn_(name + ".ffn", 2 * d_v, hidden, d, rng, dtype) {}

FusedInput BranchFusion::fuse(const Tensor& visual, const Tensor& visual_prompt,
                              const Tensor& projected_prompt, const Tensor& text,
                              const Tensor& text_prompt, const Linear& value_proj, double alpha,
                              ForwardContext& ctx) const {
  if (alpha < 0.0) throw ConfigError("fusion scalar alpha must be >= 0");
  if (visual.shape() != visual_prompt.shape()) {
    throw ShapeError("fuse: visual " + shape_str(visual.shape()) + " vs prompt " +
                     shape_str(visual_prompt.shape()));
  }
  if (projected_prompt.dim(0) != visual.dim(0)) {
    throw ShapeError("fuse: projected prompt " + shape_str(projected_prompt.shape()) +
                     " has a different length than visual " + shape_str(visual.shape()));
  }
  if (text.shape() != text_prompt.shape()) {
    throw ShapeError("fuse: text " + shape_str(text.shape()) + " vs text prompt " +
                     shape_str(text_prompt.shape()));
  }
  Tensor f = ffn_.forward(concat({visual, visual_prompt}, 1), ctx);
  if (alpha == 0.0) return {text, f};
  return {add(text, scale(text_prompt, alpha)),
          add(f, scale(value_proj.forward(projected_prompt), alpha))};
}

void BranchFusion::collect(ParameterList& out) { ffn_.collect(out); }

}  // namespace d2p
