#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "d2p/corpus.hpp"
#include "d2p/diffusion.hpp"
#include "d2p/train.hpp"

namespace d2p {

// Input to the feature provider for one sentence: the bytes of its
// whitespace-normalized text, so features do not depend on the BPE model.
std::vector<int> feature_key(const std::string& line);

// Features of every line, keyed by line number.
FeatureStore make_feature_store(const FeatureProvider& provider,
                                const std::vector<std::string>& lines, FeatureMode mode);

// Small dual-branch model and optimizer settings for the synthetic corpus.
TrainConfig toy_train_config();

// Toy corpus, joint BPE, vocabulary, features and encoded examples. The
// test split doubles as the validation set.
struct ToySetup {
  ToyCorpus corpus;
  BpeModel bpe;
  Vocabulary vocab;
  FeatureConfig features;
  TrainData data;
  FeatureStore test_authentic;

  ToySetup() = default;
  ToySetup(const ToySetup&) = delete;
  ToySetup& operator=(const ToySetup&) = delete;
};

std::unique_ptr<ToySetup> make_toy_setup(const ToyCorpusOptions& corpus,
                                         const FeatureConfig& features, long merges = 1000);

// Builds the variant's config from `base`: the named ablation switched off.
struct AblationVariant {
  std::string name;
  std::function<void(TrainConfig&)> apply;
};
std::vector<AblationVariant> ablation_variants();

struct AblationRow {
  std::string name;
  std::size_t updates = 0;
  std::size_t parameters = 0;  // trainable scalars
  double final_loss = 0.0;     // token-mean objective of the last update
  double bleu = 0.0;           // reconstructed branch on the test split
  double kl = 0.0;             // held-out branch KL on the test split
  double seconds = 0.0;
};

// Trains the variant from `base` on the toy setup, then decodes the test
// split. `base.model.transformer.vocab` is set from the setup.
AblationRow run_ablation(const ToySetup& setup, const TrainConfig& base,
                         const AblationVariant& variant);

// Fixed-width comparison table, one row per variant plus the change in
// BLEU from the first row.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

// Word-level test-split hypotheses and references of the reconstructed branch.
BleuReport test_bleu(const ToySetup& setup, const DualBranchModel& model, std::size_t beam,
                     std::size_t extra);

}  // namespace d2p
