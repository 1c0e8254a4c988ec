#include "d2p/translate.hpp"

#include <algorithm>

namespace d2p {

ModelStepper::ModelStepper(const DualBranchModel& model, Branch branch, SourceEncoding source)
    : model_(model), branch_(branch), source_(std::move(source)) {}

std::size_t ModelStepper::vocab_size() const {
  return model_.config().transformer.vocab;
}

std::vector<double> ModelStepper::log_probs(std::span<const int> prefix) const {
  DecodeState state;
  state.prefix.insert(state.prefix.end(), prefix.begin(), prefix.end());
  return model_.decode_step(branch_, state, source_);
}

Tensor feature_tensor(std::span<const float> values, std::size_t rows, std::size_t cols,
                      DType dtype) {
  if (values.size() != rows * cols) {
    throw DataError("feature matrix has " + std::to_string(values.size()) + " values, expected " +
                    std::to_string(rows) + " x " + std::to_string(cols));
  }
  const std::vector<double> v(values.begin(), values.end());
  return Tensor::from({rows, cols}, v, dtype);
}

BeamOptions decode_options(const DualBranchModel& model, std::size_t beam,
                           std::size_t source_len, std::size_t extra) {
  BeamOptions o;
  o.beam = beam;
  o.max_len = std::min(source_len + extra, model.config().transformer.max_len);
  return o;
}

Hypothesis translate_ids(const DualBranchModel& model, Branch branch, std::span<const int> src,
                         const Tensor& features, const BeamOptions& options) {
  NoGradGuard no_grad;
  ForwardContext ctx = ForwardContext::eval();
  ModelStepper stepper(model, branch, model.encode(branch, src, features, ctx));
  return beam_search(stepper, options);
}

std::vector<Hypothesis> translate_corpus(const DualBranchModel& model, Branch branch,
                                         const std::vector<std::vector<int>>& sources,
                                         const FeatureStore& features, std::size_t beam,
                                         std::size_t extra) {
  std::vector<Hypothesis> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const Tensor f = feature_tensor(features.get(i), features.rows(), features.cols(), model.dtype());
    out.push_back(translate_ids(model, branch, sources[i], f,
                                decode_options(model, beam, sources[i].size(), extra)));
  }
  return out;
}

LoadedModel load_model(const Checkpoint& checkpoint) {
  LoadedModel m;
  m.config = config_from_text(checkpoint.manifest, "checkpoint manifest");
  if (m.config.model.transformer.vocab == 0) {
    throw DataError("checkpoint manifest does not set the vocabulary size");
  }
  Rng rng(m.config.seed);
  m.model = std::make_unique<DualBranchModel>(m.config.model, rng, m.config.dtype);
  ParameterList params;
  m.model->collect(params);
  restore(checkpoint, params);
  return m;
}

}  // namespace d2p
