#pragma once

#include <array>
#include <string>
#include <vector>

namespace d2p {

enum class BleuSmoothing { kNone, kAddOne };

inline constexpr std::size_t kBleuMaxOrder = 4;

struct BleuReport {
  std::size_t max_n = kBleuMaxOrder;
  std::array<std::size_t, kBleuMaxOrder> matches{};  // clipped n-gram matches
  std::array<std::size_t, kBleuMaxOrder> totals{};   // hypothesis n-grams
  std::array<double, kBleuMaxOrder> precision{};
  std::size_t orders_used = 0;  // orders entering the geometric mean
  std::size_t hyp_len = 0;      // lc
  std::size_t ref_len = 0;      // lr
  double bp = 0.0;
  double bleu = 0.0;
};

// Corpus BLEU over whitespace-tokenized sentences: clipped n-gram counts
// pooled over the corpus, uniform weights, BP = 1 if lc > lr else
// exp(1 - lr / lc). An order with no n-grams in either hypotheses or
// references is left out of the mean; BLEU is 0 when lc = 0.
// Add-one smoothing adds 1 to matches and totals for orders >= 2.
BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                       const std::vector<std::vector<std::string>>& references,
                       std::size_t max_n = kBleuMaxOrder,
                       BleuSmoothing smoothing = BleuSmoothing::kNone);

// Same, from one sentence per line.
BleuReport corpus_bleu_lines(const std::vector<std::string>& hypotheses,
                             const std::vector<std::string>& references,
                             std::size_t max_n = kBleuMaxOrder,
                             BleuSmoothing smoothing = BleuSmoothing::kNone);

// Human-readable line followed by a key=value block.
std::string format_bleu(const BleuReport& report);

}  // namespace d2p
