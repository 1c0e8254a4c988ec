#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace d2p {

inline constexpr std::string_view kEndOfWord = "</w>";

// Splits on ASCII whitespace; empty fields are dropped.
std::vector<std::string> split_words(std::string_view line);

// UTF-8 code points as separate strings. Invalid bytes pass through singly.
std::vector<std::string> utf8_chars(std::string_view word);

// Joint byte-pair encoding with "</w>" glued to each word-final symbol.
class BpeModel {
 public:
  using Pair = std::pair<std::string, std::string>;

  BpeModel() = default;
  explicit BpeModel(std::vector<Pair> merges);

  // Greedy most-frequent-pair merging over word counts of `lines`. Ties go
  // to the lexicographically smallest pair. Stops early once the best pair
  // occurs fewer than `min_frequency` times.
  static BpeModel learn(std::span<const std::string> lines, long merges,
                        std::size_t min_frequency = 2);

  std::vector<std::string> segment_word(std::string_view word) const;
  std::vector<std::string> apply(std::string_view sentence) const;

  const std::vector<Pair>& merges() const { return merges_; }

 private:
  std::vector<Pair> merges_;
  std::map<Pair, std::size_t> rank_;
};

// Joins subword tokens back into text: "</w>" becomes a word boundary and
// runs of whitespace collapse to one space.
std::string detokenize(std::span<const std::string> tokens);

// Token <-> id map shared by source and target. Ids 0..3 are PAD, BOS, EOS
// and UNK; they are never looked up by string.
class Vocabulary {
 public:
  static constexpr std::size_t kSpecials = 4;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> symbols);

  // Symbols produced by segmenting `lines`, sorted.
  static Vocabulary build(const BpeModel& bpe, std::span<const std::string> lines);

  std::size_t size() const { return kSpecials + symbols_.size(); }
  int id(const std::string& token) const;  // UNK when absent
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  // Drops specials.
  std::vector<std::string> decode(std::span<const int> ids) const;
  const std::vector<std::string>& symbols() const { return symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

// Text file holding merges then vocabulary symbols.
void save_bpe(const std::string& path, const BpeModel& bpe, const Vocabulary& vocab);
std::pair<BpeModel, Vocabulary> load_bpe(const std::string& path);

}  // namespace d2p
