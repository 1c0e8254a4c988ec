#include "d2p/train.hpp"

#include <cmath>

#include "d2p/losses.hpp"
#include "d2p/translate.hpp"

namespace d2p {

namespace {

std::string sentence_text(const Vocabulary* vocab, std::span<const int> ids) {
  if (vocab != nullptr) return decode_sentence(*vocab, std::vector<int>(ids.begin(), ids.end()));
  std::string out;
  for (int id : ids) {
    if (id < static_cast<int>(Vocabulary::kSpecials)) continue;
    if (!out.empty()) out += ' ';
    out += std::to_string(id);
  }
  return out;
}

Tensor accumulate(const Tensor& sum, const Tensor& term) {
  return sum.defined() ? add(sum, term) : term;
}

}  // namespace

Tensor combine_objective(const Tensor& sdf, const Tensor& aut, const Tensor& consistency,
                         const LossWeights& w) {
  return add(scale(add(sdf, aut), w.mu), scale(consistency, w.lambda));
}

ObjectiveTerms example_objective(const DualBranchModel& model, const Example& ex,
                                 const Tensor& reconstructed, const Tensor& authentic,
                                 const LossWeights& w, double label_smoothing, double dropout,
                                 std::uint64_t dropout_seed) {
  ForwardContext ctx_d = ForwardContext::train(dropout, dropout_seed);
  ForwardContext ctx_a = ForwardContext::train(dropout, dropout_seed);
  const std::vector<int> tin = ex.target_input();
  const Tensor ld = model.logits(Branch::kReconstructed, ex.src, reconstructed, tin, ctx_d);
  const Tensor la = model.logits(Branch::kAuthentic, ex.src, authentic, tin, ctx_a);
  const TokenLoss nd = label_smoothed_sum(ld, ex.tgt, label_smoothing);
  const TokenLoss na = label_smoothed_sum(la, ex.tgt, label_smoothing);
  const bool track = w.lambda > 0.0;
  const ConsistencySum c =
      consistency_sum(softmax_rows(track ? ld : ld.detach()),
                      softmax_rows(track ? la : la.detach()), ex.tgt, w.mode, w.stop_gradient);
  return {nd.total, na.total, c.total, nd.tokens, c.floored};
}

std::vector<Tensor> feature_tensors(const std::vector<Example>& examples,
                                    const FeatureStore& store, DType dtype) {
  std::vector<Tensor> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    out.push_back(feature_tensor(store.get(e.id), store.rows(), store.cols(), dtype));
  }
  return out;
}

Trainer::Trainer(TrainConfig config, const TrainData& data)
    : config_(std::move(config)), data_(data) {
  config_.validate();
  if (config_.model.transformer.vocab == 0) {
    throw ConfigError("model vocabulary size is not set");
  }
  if (data_.train.empty()) throw DataError("training corpus is empty");
  for (const FeatureStore* s : {&data_.reconstructed, &data_.authentic}) {
    if (s->rows() != config_.model.prompt.feature_len ||
        s->cols() != config_.model.prompt.feature_dim) {
      throw DataError("feature store is " + std::to_string(s->rows()) + " x " +
                      std::to_string(s->cols()) + ", model expects " +
                      std::to_string(config_.model.prompt.feature_len) + " x " +
                      std::to_string(config_.model.prompt.feature_dim));
    }
  }
  Rng rng(seed_combine(config_.seed, hash_string("init")));
  model_ = std::make_unique<DualBranchModel>(config_.model, rng, config_.dtype);
  model_->collect(params_);
  adam_ = std::make_unique<Adam>(params_, config_.adam);
  reconstructed_ = feature_tensors(data_.train, data_.reconstructed, config_.dtype);
  authentic_ = feature_tensors(data_.train, data_.authentic, config_.dtype);
  if (!data_.valid.empty()) {
    valid_features_ = feature_tensors(data_.valid, data_.valid_features, config_.dtype);
  }
}

StepRecord Trainer::update(const std::vector<std::vector<std::size_t>>& micro_batches) {
  const std::uint64_t u = adam_->state().step + 1;
  const LossWeights& w = config_.loss;
  StepRecord rec;
  rec.update = u;
  rec.epoch = epoch_;
  double sdf = 0.0, aut = 0.0, con = 0.0, total = 0.0;
  for (const auto& batch : micro_batches) {
    Tensor s_sdf, s_aut, s_con;
    for (std::size_t idx : batch) {
      if (idx >= data_.train.size()) throw ContractError("example index out of range");
      const Example& ex = data_.train[idx];
      const std::uint64_t seed = seed_combine(seed_combine(config_.seed, u), ex.id);
      const ObjectiveTerms t = example_objective(*model_, ex, reconstructed_[idx], authentic_[idx],
                                                 w, config_.label_smoothing,
                                                 config_.model.transformer.dropout, seed);
      s_sdf = accumulate(s_sdf, t.sdf);
      s_aut = accumulate(s_aut, t.aut);
      s_con = accumulate(s_con, t.consistency);
      rec.tokens += t.tokens;
      rec.floored += t.floored;
      ++rec.sentences;
    }
    if (!s_sdf.defined()) continue;
    const Tensor objective = combine_objective(s_sdf, s_aut, s_con, w);
    const double value = objective.item();
    if (!std::isfinite(value)) {
      throw NumericError("training loss is not finite at update " + std::to_string(u));
    }
    sdf += s_sdf.item();
    aut += s_aut.item();
    con += s_con.item();
    total += value;
    backward(objective);
  }
  if (rec.tokens == 0) throw ContractError("update received no target tokens");
  const double n = static_cast<double>(rec.tokens);
  rec.lr = adam_->learning_rate(u);
  adam_->step(1.0 / n);
  rec.sdf = sdf / n;
  rec.aut = aut / n;
  rec.consistency = con / n;
  rec.total = total / n;
  return rec;
}

const std::vector<Batch>& Trainer::schedule() {
  if (batches_epoch_ != epoch_) {
    batches_ = batch_by_tokens(data_.train, config_.batch_tokens, config_.seed, epoch_);
    batches_epoch_ = epoch_;
  }
  return batches_;
}

bool Trainer::finished() const {
  if (epoch_ >= config_.epochs) return true;
  return config_.max_updates != 0 && updates() >= config_.max_updates;
}

std::optional<StepRecord> Trainer::step() {
  if (finished()) return std::nullopt;
  const auto& batches = schedule();
  std::vector<std::vector<std::size_t>> micro;
  while (micro.size() < config_.accumulation && cursor_ < batches.size()) {
    micro.push_back(batches[cursor_++].examples);
  }
  StepRecord rec = update(micro);
  if (cursor_ >= batches.size()) {
    ++epoch_;
    cursor_ = 0;
  }
  return rec;
}

Checkpoint Trainer::checkpoint(bool with_optimizer) const {
  Checkpoint c = capture(params_, config_text(config_));
  if (with_optimizer) c.optimizer = adam_->state();
  c.epoch = epoch_;
  c.cursor = cursor_;
  return c;
}

void Trainer::resume(const Checkpoint& checkpoint) {
  restore(checkpoint, params_);
  if (checkpoint.optimizer) {
    adam_->set_state(*checkpoint.optimizer);
  } else {
    AdamState fresh;
    for (const auto* p : params_) {
      fresh.m.emplace_back(p->value().numel(), 0.0);
      fresh.v.emplace_back(p->value().numel(), 0.0);
    }
    adam_->set_state(std::move(fresh));
  }
  epoch_ = checkpoint.epoch;
  cursor_ = checkpoint.cursor;
}

BleuReport Trainer::validate() const {
  if (data_.valid.empty()) throw DataError("no validation sentences");
  std::vector<std::string> hyps, refs;
  for (std::size_t i = 0; i < data_.valid.size(); ++i) {
    const Example& ex = data_.valid[i];
    const BeamOptions o = decode_options(*model_, config_.beam, ex.src.size(), config_.decode_extra);
    const Hypothesis h = translate_ids(*model_, Branch::kReconstructed, ex.src, valid_features_[i], o);
    hyps.push_back(sentence_text(data_.vocab, h.tokens));
    refs.push_back(sentence_text(data_.vocab, ex.tgt));
  }
  return corpus_bleu_lines(hyps, refs);
}

TrainReport run_training(Trainer& trainer, const TrainHooks& hooks) {
  TrainReport report;
  const std::size_t every = trainer.config().valid_every;
  while (auto rec = trainer.step()) {
    report.steps.push_back(*rec);
    if (hooks.on_step) hooks.on_step(*rec);
    if (trainer.cursor() != 0) continue;
    const std::uint64_t done = trainer.epoch() - 1;
    if (hooks.on_epoch) hooks.on_epoch(done, trainer);
    if (every != 0 && trainer.has_validation() && (done + 1) % every == 0) {
      ValidationRecord v{done, trainer.updates(), trainer.validate()};
      if (hooks.on_validation) hooks.on_validation(v);
      report.validation.push_back(v);
    }
  }
  return report;
}

double mean_branch_kl(const DualBranchModel& model, const std::vector<Example>& examples,
                      const FeatureStore& reconstructed, const FeatureStore& authentic) {
  NoGradGuard no_grad;
  double sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    ForwardContext ctx = ForwardContext::eval();
    const std::vector<int> tin = ex.target_input();
    const Tensor fd = feature_tensor(reconstructed.get(ex.id), reconstructed.rows(),
                                     reconstructed.cols(), model.dtype());
    const Tensor fa = feature_tensor(authentic.get(ex.id), authentic.rows(), authentic.cols(),
                                     model.dtype());
    const Tensor pd = softmax_rows(model.logits(Branch::kReconstructed, ex.src, fd, tin, ctx));
    const Tensor pa = softmax_rows(model.logits(Branch::kAuthentic, ex.src, fa, tin, ctx));
    const ConsistencySum c = consistency_sum(pd, pa, ex.tgt, ConsistencyMode::kKl);
    sum += c.total.item();
    tokens += c.tokens;
  }
  if (tokens == 0) throw DataError("no target tokens to compare");
  return sum / static_cast<double>(tokens);
}

}  // namespace d2p
