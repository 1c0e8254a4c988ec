#pragma once

#include <span>
#include <vector>

#include "d2p/tokens.hpp"

namespace d2p {

// Next-token log-probabilities given the tokens emitted so far (BOS implied).
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<double> log_probs(std::span<const int> prefix) const = 0;
};

struct BeamOptions {
  std::size_t beam = 5;
  std::size_t max_len = 32;   // output tokens including the final EOS
  bool length_normalize = true;
  int eos = kEosId;
  int pad = kPadId;           // never emitted
  int bos = kBosId;           // never emitted
};

struct Hypothesis {
  std::vector<int> tokens;    // ends with EOS
  double log_prob = 0.0;
  double score = 0.0;         // log_prob, divided by length when normalizing
  bool truncated = false;     // EOS was forced at max_len
};

// Score used to rank finished hypotheses.
double hypothesis_score(double log_prob, std::size_t length, bool length_normalize);

Hypothesis greedy_search(const StepModel& model, const BeamOptions& options);

// Each step ranks the extensions of all live hypotheses by cumulative
// log-probability (ties: earlier hypothesis, then lower token id) and keeps
// the best 2 * beam; EOS extensions among them finish, the first `beam`
// others stay live. The greedy result joins the finished set, so the
// returned score is never below greedy's. Search stops when no live
// hypothesis can still beat the best finished score.
Hypothesis beam_search(const StepModel& model, const BeamOptions& options);

// Every EOS-terminated sequence up to max_len, best by score (ties: the
// lexicographically smallest). Exponential; for tests.
Hypothesis exhaustive_search(const StepModel& model, const BeamOptions& options);

}  // namespace d2p
