#include "d2p/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "d2p/translate.hpp"

namespace d2p {

std::vector<int> feature_key(const std::string& line) {
  std::vector<int> key;
  for (const auto& w : split_words(line)) {
    if (!key.empty()) key.push_back(' ');
    for (unsigned char c : w) key.push_back(c);
  }
  return key;
}

FeatureStore make_feature_store(const FeatureProvider& provider,
                                const std::vector<std::string>& lines, FeatureMode mode) {
  const FeatureConfig& c = provider.config();
  FeatureStore store(c.rows, c.dim);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const Vec v = provider.features(feature_key(lines[i]), mode);
    store.put(i, std::vector<float>(v.begin(), v.end()));
  }
  return store;
}

TrainConfig toy_train_config() {
  TrainConfig c;
  auto& t = c.model.transformer;
  t.layers_enc = 1;
  t.layers_dec = 1;
  t.d = 32;
  t.ffn = 64;
  t.heads = 2;
  t.dropout = 0.1;
  t.max_len = 64;
  auto& p = c.model.prompt;
  p.feature_len = 8;
  p.feature_dim = 16;
  p.vpg.bottleneck = 32;
  c.adam.lr = 3e-3;
  c.adam.warmup = 200;
  c.batch_tokens = 128;
  c.accumulation = 1;
  c.epochs = 8;
  c.valid_every = 0;
  return c;
}

std::unique_ptr<ToySetup> make_toy_setup(const ToyCorpusOptions& corpus_options,
                                         const FeatureConfig& feature_config, long merges) {
  auto s = std::make_unique<ToySetup>();
  s->corpus = make_toy_corpus(corpus_options);
  std::vector<std::string> joint = s->corpus.train_src;
  joint.insert(joint.end(), s->corpus.train_tgt.begin(), s->corpus.train_tgt.end());
  s->bpe = BpeModel::learn(joint, merges);
  s->vocab = Vocabulary::build(s->bpe, joint);
  s->features = feature_config;
  const FeatureProvider provider(feature_config);
  auto& d = s->data;
  d.train = encode_parallel(s->bpe, s->vocab, s->corpus.train_src, s->corpus.train_tgt);
  d.valid = encode_parallel(s->bpe, s->vocab, s->corpus.test_src, s->corpus.test_tgt);
  d.reconstructed = make_feature_store(provider, s->corpus.train_src, FeatureMode::kReconstructed);
  d.authentic = make_feature_store(provider, s->corpus.train_src, FeatureMode::kAuthentic);
  d.valid_features = make_feature_store(provider, s->corpus.test_src, FeatureMode::kReconstructed);
  d.vocab = &s->vocab;
  s->test_authentic = make_feature_store(provider, s->corpus.test_src, FeatureMode::kAuthentic);
  return s;
}

std::vector<AblationVariant> ablation_variants() {
  return {
      {"full", [](TrainConfig&) {}},
      {"w/o L_kl", [](TrainConfig& c) { c.loss.lambda = 0.0; }},
      {"w/o VPG-global", [](TrainConfig& c) { c.model.prompt.vpg.use_global = false; }},
      {"w/o VPG-local", [](TrainConfig& c) { c.model.prompt.vpg.use_local = false; }},
      {"w/o F", [](TrainConfig& c) { c.model.prompt.use_coupling = false; }},
      {"w/o VPG", [](TrainConfig& c) { c.model.prompt.use_vpg = false; }},
      {"w/o prompt", [](TrainConfig& c) { c.model.prompt.alpha = 0.0; }},
  };
}

BleuReport test_bleu(const ToySetup& setup, const DualBranchModel& model, std::size_t beam,
                     std::size_t extra) {
  std::vector<std::vector<int>> sources;
  for (const auto& ex : setup.data.valid) sources.push_back(ex.src);
  const auto hyps = translate_corpus(model, Branch::kReconstructed, sources,
                                     setup.data.valid_features, beam, extra);
  std::vector<std::string> hyp_text;
  for (const auto& h : hyps) hyp_text.push_back(decode_sentence(setup.vocab, h.tokens));
  return corpus_bleu_lines(hyp_text, setup.corpus.test_tgt);
}

AblationRow run_ablation(const ToySetup& setup, const TrainConfig& base,
                         const AblationVariant& variant) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig config = base;
  config.model.transformer.vocab = setup.vocab.size();
  variant.apply(config);
  Trainer trainer(config, setup.data);
  const TrainReport report = run_training(trainer);
  AblationRow row;
  row.name = variant.name;
  row.updates = trainer.updates();
  for (const auto* p : trainer.parameters()) row.parameters += p->value().numel();
  if (!report.steps.empty()) row.final_loss = report.steps.back().total;
  row.bleu = test_bleu(setup, trainer.model(), config.beam, config.decode_extra).bleu;
  row.kl = mean_branch_kl(trainer.model(), setup.data.valid, setup.data.valid_features,
                          setup.test_authentic);
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %10s %10s %8s %8s %10s %8s\n", "variant", "updates",
                "params", "loss", "BLEU", "dBLEU", "KL", "seconds");
  os << line;
  const double ref = rows.empty() ? 0.0 : rows.front().bleu;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-16s %8zu %10zu %10.4f %8.2f %+8.2f %10.5f %8.1f\n",
                  r.name.c_str(), r.updates, r.parameters, r.final_loss, 100.0 * r.bleu,
                  100.0 * (r.bleu - ref), r.kl, r.seconds);
    os << line;
  }
  return os.str();
}

}  // namespace d2p
