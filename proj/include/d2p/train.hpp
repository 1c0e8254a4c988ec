#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "d2p/bleu.hpp"
#include "d2p/checkpoint.hpp"
#include "d2p/config.hpp"
#include "d2p/corpus.hpp"
#include "d2p/dual_branch.hpp"
#include "d2p/optim.hpp"

namespace d2p {

struct TrainData {
  std::vector<Example> train;
  std::vector<Example> valid;
  FeatureStore reconstructed;   // train sentences
  FeatureStore authentic;       // train sentences
  FeatureStore valid_features;  // valid sentences, decoding input
  const Vocabulary* vocab = nullptr;  // for word-level validation BLEU
};

// Summed (not averaged) loss terms of one sentence pair.
struct ObjectiveTerms {
  Tensor sdf;          // reconstructed-branch label-smoothed NLL
  Tensor aut;          // authentic-branch label-smoothed NLL
  Tensor consistency;  // branch divergence; detached when lambda is 0
  std::size_t tokens = 0;
  std::size_t floored = 0;
};

// Both branches share `dropout_seed`, so their dropout masks match.
ObjectiveTerms example_objective(const DualBranchModel& model, const Example& ex,
                                 const Tensor& reconstructed, const Tensor& authentic,
                                 const LossWeights& w, double label_smoothing, double dropout,
                                 std::uint64_t dropout_seed);

// mu * (sdf + aut) + lambda * consistency
Tensor combine_objective(const Tensor& sdf, const Tensor& aut, const Tensor& consistency,
                         const LossWeights& w);

struct StepRecord {
  std::uint64_t update = 0;  // 1-based optimizer step
  std::uint64_t epoch = 0;
  double sdf = 0.0;          // reconstructed-branch translation loss
  double aut = 0.0;          // authentic-branch translation loss
  double consistency = 0.0;
  double total = 0.0;        // token mean of the summed objective
  double lr = 0.0;
  std::size_t tokens = 0;
  std::size_t sentences = 0;
  std::size_t floored = 0;   // probabilities floored in the consistency term
};

struct ValidationRecord {
  std::uint64_t epoch = 0;
  std::uint64_t update = 0;
  BleuReport bleu;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validation;
};

// Dual-branch consistency training over a fixed corpus. One optimizer
// update consumes `accumulation` token batches; updates never straddle an
// epoch. Dropout seeds derive from (seed, update, sentence id), so a run
// resumed from a checkpoint replays exactly.
class Trainer {
 public:
  // config.model.transformer.vocab must be set.
  Trainer(TrainConfig config, const TrainData& data);

  // One update from explicit micro-batches (indices into data.train).
  // Gradients are summed over every target token and divided by the total
  // token count, so the split into micro-batches does not change the update.
  StepRecord update(const std::vector<std::vector<std::size_t>>& micro_batches);

  // Next scheduled update; nullopt once epochs or max_updates are reached.
  std::optional<StepRecord> step();
  bool finished() const;

  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t cursor() const { return cursor_; }
  std::uint64_t updates() const { return adam_->state().step; }

  Checkpoint checkpoint(bool with_optimizer = true) const;
  void resume(const Checkpoint& checkpoint);

  bool has_validation() const { return !data_.valid.empty(); }
  // Beam-search BLEU of the reconstructed branch on data.valid.
  BleuReport validate() const;

  DualBranchModel& model() { return *model_; }
  const DualBranchModel& model() const { return *model_; }
  const TrainConfig& config() const { return config_; }
  const ParameterList& parameters() const { return params_; }

 private:
  const std::vector<Batch>& schedule();

  TrainConfig config_;
  const TrainData& data_;
  std::unique_ptr<DualBranchModel> model_;
  ParameterList params_;
  std::unique_ptr<Adam> adam_;
  std::vector<Tensor> reconstructed_, authentic_, valid_features_;
  std::uint64_t epoch_ = 0;
  std::uint64_t cursor_ = 0;
  std::vector<Batch> batches_;
  std::optional<std::uint64_t> batches_epoch_;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  // Called after the last update of each epoch, with the finished epoch.
  std::function<void(std::uint64_t, Trainer&)> on_epoch;
  std::function<void(const ValidationRecord&)> on_validation;
};

TrainReport run_training(Trainer& trainer, const TrainHooks& hooks = {});

// Held-out mean per-token KL(reconstructed || authentic) under teacher
// forcing, eval mode.
double mean_branch_kl(const DualBranchModel& model, const std::vector<Example>& examples,
                      const FeatureStore& reconstructed, const FeatureStore& authentic);

// Features of `examples` looked up by sentence id, as tensors.
std::vector<Tensor> feature_tensors(const std::vector<Example>& examples,
                                    const FeatureStore& store, DType dtype);

}  // namespace d2p
