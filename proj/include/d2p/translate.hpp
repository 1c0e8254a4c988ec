#pragma once

#include <memory>
#include <span>
#include <vector>

#include "d2p/beam.hpp"
#include "d2p/checkpoint.hpp"
#include "d2p/config.hpp"
#include "d2p/corpus.hpp"
#include "d2p/dual_branch.hpp"

namespace d2p {

// One sentence's decoder as a StepModel over a fixed source encoding.
class ModelStepper : public StepModel {
 public:
  ModelStepper(const DualBranchModel& model, Branch branch, SourceEncoding source);
  std::size_t vocab_size() const override;
  std::vector<double> log_probs(std::span<const int> prefix) const override;

 private:
  const DualBranchModel& model_;
  Branch branch_;
  SourceEncoding source_;
};

// K x D feature matrix as a constant tensor.
Tensor feature_tensor(std::span<const float> values, std::size_t rows, std::size_t cols,
                      DType dtype);

// Output length cap: source length + extra, bounded by the model's max_len.
BeamOptions decode_options(const DualBranchModel& model, std::size_t beam,
                           std::size_t source_len, std::size_t extra);

// Beam search in eval mode; `src` ends with EOS. The returned tokens end
// with EOS.
Hypothesis translate_ids(const DualBranchModel& model, Branch branch, std::span<const int> src,
                         const Tensor& features, const BeamOptions& options);

// Translation of every source (each ending in EOS) with the features of the
// same line number in `features`.
std::vector<Hypothesis> translate_corpus(const DualBranchModel& model, Branch branch,
                                         const std::vector<std::vector<int>>& sources,
                                         const FeatureStore& features, std::size_t beam,
                                         std::size_t extra);

// Model rebuilt from a checkpoint's manifest and parameters.
struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<DualBranchModel> model;
};

LoadedModel load_model(const Checkpoint& checkpoint);

}  // namespace d2p
