#include "d2p/beam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "d2p/error.hpp"

namespace d2p {

namespace {

void check(const StepModel& model, const BeamOptions& o) {
  if (o.beam == 0) throw ConfigError("beam size must be positive");
  if (o.max_len == 0) throw ConfigError("max_len must be positive");
  if (o.eos < 0 || static_cast<std::size_t>(o.eos) >= model.vocab_size()) {
    throw ConfigError("EOS id outside the vocabulary");
  }
}

bool emittable(const BeamOptions& o, int token) { return token != o.pad && token != o.bos; }

std::vector<double> checked_log_probs(const StepModel& model, std::span<const int> prefix) {
  auto lp = model.log_probs(prefix);
  if (lp.size() != model.vocab_size()) {
    throw ShapeError("step model returned " + std::to_string(lp.size()) +
                     " log-probabilities for a vocabulary of " +
                     std::to_string(model.vocab_size()));
  }
  return lp;
}

int argmax(const std::vector<double>& lp, const BeamOptions& o) {
  int best = -1;
  for (std::size_t v = 0; v < lp.size(); ++v) {
    const int t = static_cast<int>(v);
    if (!emittable(o, t)) continue;
    if (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)]) best = t;
  }
  return best;
}

Hypothesis finish(std::vector<int> tokens, double log_prob, bool truncated, const BeamOptions& o) {
  Hypothesis h;
  h.tokens = std::move(tokens);
  h.log_prob = log_prob;
  h.score = hypothesis_score(log_prob, h.tokens.size(), o.length_normalize);
  h.truncated = truncated;
  return h;
}

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

double hypothesis_score(double log_prob, std::size_t length, bool length_normalize) {
  return length_normalize ? log_prob / static_cast<double>(std::max<std::size_t>(length, 1))
                          : log_prob;
}

Hypothesis greedy_search(const StepModel& model, const BeamOptions& o) {
  check(model, o);
  std::vector<int> tokens;
  double total = 0.0;
  while (true) {
    const auto lp = checked_log_probs(model, tokens);
    const int best = argmax(lp, o);
    if (tokens.size() + 1 == o.max_len && best != o.eos) {
      tokens.push_back(o.eos);
      total += lp[static_cast<std::size_t>(o.eos)];
      return finish(std::move(tokens), total, true, o);
    }
    tokens.push_back(best);
    total += lp[static_cast<std::size_t>(best)];
    if (best == o.eos) return finish(std::move(tokens), total, false, o);
  }
}

Hypothesis beam_search(const StepModel& model, const BeamOptions& o) {
  check(model, o);
  Hypothesis best = greedy_search(model, o);
  if (o.beam == 1) return best;

  struct Live {
    std::vector<int> tokens;
    double log_prob;
  };
  struct Candidate {
    double log_prob;
    std::size_t parent;
    int token;
  };
  std::vector<Live> live{{{}, 0.0}};
  for (std::size_t t = 0; t < o.max_len && !live.empty(); ++t) {
    const bool forced = t + 1 == o.max_len;
    std::vector<Candidate> cands;
    std::vector<bool> eos_is_top(live.size(), false);
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto lp = checked_log_probs(model, live[h].tokens);
      if (forced) {
        eos_is_top[h] = argmax(lp, o) == o.eos;
        cands.push_back({live[h].log_prob + lp[static_cast<std::size_t>(o.eos)], h, o.eos});
        continue;
      }
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (emittable(o, static_cast<int>(v))) {
          cands.push_back({live[h].log_prob + lp[v], h, static_cast<int>(v)});
        }
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    if (!forced && cands.size() > 2 * o.beam) cands.resize(2 * o.beam);

    std::vector<Live> next;
    for (const auto& c : cands) {
      auto tokens = live[c.parent].tokens;
      tokens.push_back(c.token);
      if (c.token == o.eos) {
        Hypothesis h = finish(std::move(tokens), c.log_prob, forced && !eos_is_top[c.parent], o);
        if (better(h, best)) best = std::move(h);
      } else if (next.size() < o.beam) {
        next.push_back({std::move(tokens), c.log_prob});
      }
    }
    live = std::move(next);

    // A live prefix with cumulative log-probability c <= 0 ends at most
    // with score c / max_len (normalized) or c.
    bool open = false;
    for (const auto& l : live) {
      const double bound = o.length_normalize ? l.log_prob / static_cast<double>(o.max_len)
                                              : l.log_prob;
      if (bound > best.score) open = true;
    }
    if (!open) break;
  }
  return best;
}

Hypothesis exhaustive_search(const StepModel& model, const BeamOptions& o) {
  check(model, o);
  Hypothesis best;
  best.score = -std::numeric_limits<double>::infinity();
  std::vector<int> prefix;
  auto walk = [&](auto&& self, double log_prob) -> void {
    const auto lp = checked_log_probs(model, prefix);
    const bool forced = prefix.size() + 1 == o.max_len;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      const int t = static_cast<int>(v);
      if (!emittable(o, t) || (forced && t != o.eos)) continue;
      prefix.push_back(t);
      if (t == o.eos) {
        Hypothesis h = finish(prefix, log_prob + lp[v], forced && argmax(lp, o) != o.eos, o);
        if (better(h, best)) best = std::move(h);
      } else {
        self(self, log_prob + lp[v]);
      }
      prefix.pop_back();
    }
  };
  walk(walk, 0.0);
  return best;
}

}  // namespace d2p
