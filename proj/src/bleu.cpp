#include "d2p/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "d2p/bpe.hpp"
#include "d2p/error.hpp"

namespace d2p {

namespace {

using Gram = std::vector<std::string>;

std::map<Gram, std::size_t> count_grams(const std::vector<std::string>& words, std::size_t n) {
  std::map<Gram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++counts[Gram(words.begin() + static_cast<long>(i), words.begin() + static_cast<long>(i + n))];
  }
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                       const std::vector<std::vector<std::string>>& refs, std::size_t max_n,
                       BleuSmoothing smoothing) {
  if (hyps.empty()) throw DataError("BLEU needs at least one hypothesis");
  if (hyps.size() != refs.size()) {
    throw DataError("BLEU got " + std::to_string(hyps.size()) + " hypotheses and " +
                    std::to_string(refs.size()) + " references");
  }
  if (max_n == 0 || max_n > kBleuMaxOrder) {
    throw ConfigError("BLEU order must be in 1.." + std::to_string(kBleuMaxOrder));
  }
  BleuReport r;
  r.max_n = max_n;
  std::array<std::size_t, kBleuMaxOrder> ref_totals{};
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    r.hyp_len += hyps[s].size();
    r.ref_len += refs[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto h = count_grams(hyps[s], n);
      const auto ref = count_grams(refs[s], n);
      for (const auto& [gram, c] : h) {
        const auto it = ref.find(gram);
        const std::size_t credited = it == ref.end() ? 0 : std::min(c, it->second);
        r.matches[n - 1] += credited;
        r.totals[n - 1] += c;
      }
      if (refs[s].size() >= n) ref_totals[n - 1] += refs[s].size() - n + 1;
    }
  }
  if (r.hyp_len == 0) return r;

  r.bp = r.hyp_len > r.ref_len
             ? 1.0
             : std::exp(1.0 - static_cast<double>(r.ref_len) / static_cast<double>(r.hyp_len));
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= max_n; ++n) {
    if (r.totals[n - 1] == 0 && ref_totals[n - 1] == 0) continue;
    double m = static_cast<double>(r.matches[n - 1]);
    double t = static_cast<double>(r.totals[n - 1]);
    if (smoothing == BleuSmoothing::kAddOne && n >= 2) {
      m += 1.0;
      t += 1.0;
    }
    ++r.orders_used;
    r.precision[n - 1] = t == 0.0 ? 0.0 : m / t;
    if (r.precision[n - 1] == 0.0) {
      zero = true;
    } else {
      log_sum += std::log(r.precision[n - 1]);
    }
  }
  if (zero || r.orders_used == 0) {
    r.bleu = 0.0;
  } else {
    r.bleu = r.bp * std::exp(log_sum / static_cast<double>(r.orders_used));
  }
  return r;
}

BleuReport corpus_bleu_lines(const std::vector<std::string>& hyps,
                             const std::vector<std::string>& refs, std::size_t max_n,
                             BleuSmoothing smoothing) {
  std::vector<std::vector<std::string>> h, r;
  for (const auto& l : hyps) h.push_back(split_words(l));
  for (const auto& l : refs) r.push_back(split_words(l));
  return corpus_bleu(h, r, max_n, smoothing);
}

std::string format_bleu(const BleuReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "BLEU = %.2f", 100.0 * r.bleu);
  out += buf;
  for (std::size_t n = 0; n < r.max_n; ++n) {
    std::snprintf(buf, sizeof buf, "%s%.1f", n == 0 ? " " : "/", 100.0 * r.precision[n]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, " (BP = %.3f, hyp_len = %zu, ref_len = %zu)\n", r.bp, r.hyp_len,
                r.ref_len);
  out += buf;
  std::snprintf(buf, sizeof buf, "bleu=%.9f\nbp=%.9f\nhyp_len=%zu\nref_len=%zu\n", r.bleu, r.bp,
                r.hyp_len, r.ref_len);
  out += buf;
  for (std::size_t n = 0; n < r.max_n; ++n) {
    std::snprintf(buf, sizeof buf, "p%zu=%.9f\nmatches%zu=%zu\ntotals%zu=%zu\n", n + 1,
                  r.precision[n], n + 1, r.matches[n], n + 1, r.totals[n]);
    out += buf;
  }
  return out;
}

}  // namespace d2p
