#include "d2p/bpe.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "d2p/error.hpp"
#include "d2p/tokens.hpp"

namespace d2p {

namespace {

const std::string kSpecialNames[Vocabulary::kSpecials] = {"<pad>", "<s>", "</s>", "<unk>"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::vector<std::string> base_symbols(std::string_view word) {
  auto chars = utf8_chars(word);
  if (!chars.empty()) chars.back() += kEndOfWord;
  return chars;
}

// Merges every non-overlapping occurrence of `pair`, left to right.
void merge_in_place(std::vector<std::string>& symbols, const BpeModel::Pair& pair) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == pair.first && symbols[i + 1] == pair.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace

std::vector<std::string> split_words(std::string_view line) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) words.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return words;
}

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto lead = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) len = 4;
    else if (lead >= 0xE0) len = lead < 0xF0 ? 3 : 1;
    else if (lead >= 0xC0) len = 2;
    if (i + len > word.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(word[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

BpeModel::BpeModel(std::vector<Pair> merges) : merges_(std::move(merges)) {
  for (std::size_t r = 0; r < merges_.size(); ++r) rank_.emplace(merges_[r], r);
}

BpeModel BpeModel::learn(std::span<const std::string> lines, long merges,
                         std::size_t min_frequency) {
  if (merges < 0) throw ConfigError("merge count must be >= 0, got " + std::to_string(merges));
  std::map<std::string, std::size_t> counts;
  for (const auto& line : lines) {
    for (auto& w : split_words(line)) ++counts[w];
  }
  if (counts.empty()) throw DataError("cannot learn BPE from an empty corpus");

  struct Entry {
    std::vector<std::string> symbols;
    std::size_t count;
  };
  std::vector<Entry> words;
  words.reserve(counts.size());
  for (const auto& [w, c] : counts) words.push_back({base_symbols(w), c});

  std::vector<Pair> learned;
  for (long m = 0; m < merges; ++m) {
    std::map<Pair, std::size_t> stats;
    for (const auto& e : words) {
      for (std::size_t i = 0; i + 1 < e.symbols.size(); ++i) {
        stats[{e.symbols[i], e.symbols[i + 1]}] += e.count;
      }
    }
    // std::map iterates pairs in lexicographic order, so the first maximum
    // is the tie-break winner.
    const Pair* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [p, c] : stats) {
      if (c > best_count) {
        best = &p;
        best_count = c;
      }
    }
    if (best == nullptr || best_count < std::max<std::size_t>(min_frequency, 1)) break;
    const Pair chosen = *best;
    for (auto& e : words) merge_in_place(e.symbols, chosen);
    learned.push_back(chosen);
  }
  return BpeModel(std::move(learned));
}

std::vector<std::string> BpeModel::segment_word(std::string_view word) const {
  auto symbols = base_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find({symbols[i], symbols[i + 1]});
      if (it != rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_pos = i;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    symbols[best_pos] += symbols[best_pos + 1];
    symbols.erase(symbols.begin() + static_cast<long>(best_pos) + 1);
  }
  return symbols;
}

std::vector<std::string> BpeModel::apply(std::string_view sentence) const {
  std::vector<std::string> out;
  for (const auto& w : split_words(sentence)) {
    auto s = segment_word(w);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string text;
  for (const auto& t : tokens) text += t;
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto hit = text.find(kEndOfWord, pos);
    out.append(text, pos, hit == std::string::npos ? std::string::npos : hit - pos);
    if (hit == std::string::npos) break;
    out += ' ';
    pos = hit + kEndOfWord.size();
  }
  std::string joined;
  for (const auto& w : split_words(out)) {
    if (!joined.empty()) joined += ' ';
    joined += w;
  }
  return joined;
}

Vocabulary::Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].empty()) throw DataError("vocabulary symbol " + std::to_string(i) + " is empty");
    if (!index_.emplace(symbols_[i], static_cast<int>(kSpecials + i)).second) {
      throw DataError("duplicate vocabulary symbol '" + symbols_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(const BpeModel& bpe, std::span<const std::string> lines) {
  std::set<std::string> seen;
  for (const auto& line : lines) {
    for (auto& t : bpe.apply(line)) seen.insert(std::move(t));
  }
  return Vocabulary(std::vector<std::string>(seen.begin(), seen.end()));
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(size()));
  }
  if (static_cast<std::size_t>(id) < kSpecials) return kSpecialNames[id];
  return symbols_[static_cast<std::size_t>(id) - kSpecials];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i >= static_cast<int>(kSpecials)) out.push_back(token(i));
  }
  return out;
}

void save_bpe(const std::string& path, const BpeModel& bpe, const Vocabulary& vocab) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write BPE model '" + path + "'");
  f << "d2p-bpe 1\n";
  f << "merges " << bpe.merges().size() << "\n";
  for (const auto& [a, b] : bpe.merges()) f << a << ' ' << b << "\n";
  f << "vocab " << vocab.symbols().size() << "\n";
  for (const auto& s : vocab.symbols()) f << s << "\n";
  if (!f) throw DataError("failed writing BPE model '" + path + "'");
}

std::pair<BpeModel, Vocabulary> load_bpe(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open BPE model '" + path + "'");
  auto fail = [&](const std::string& why) -> DataError {
    return DataError("BPE model '" + path + "': " + why);
  };
  std::string line;
  if (!std::getline(f, line) || line != "d2p-bpe 1") throw fail("missing 'd2p-bpe 1' header");
  auto read_count = [&](const std::string& key) {
    if (!std::getline(f, line)) throw fail("missing '" + key + "' line");
    std::istringstream in(line);
    std::string k;
    long n = -1;
    if (!(in >> k >> n) || k != key || n < 0) throw fail("bad '" + key + "' line: " + line);
    return static_cast<std::size_t>(n);
  };
  const std::size_t n_merges = read_count("merges");
  std::vector<BpeModel::Pair> merges;
  merges.reserve(n_merges);
  for (std::size_t i = 0; i < n_merges; ++i) {
    if (!std::getline(f, line)) throw fail("truncated merge list");
    auto parts = split_words(line);
    if (parts.size() != 2) throw fail("bad merge line " + std::to_string(i + 1) + ": " + line);
    merges.emplace_back(parts[0], parts[1]);
  }
  const std::size_t n_vocab = read_count("vocab");
  std::vector<std::string> symbols;
  symbols.reserve(n_vocab);
  for (std::size_t i = 0; i < n_vocab; ++i) {
    if (!std::getline(f, line)) throw fail("truncated vocabulary");
    symbols.push_back(line);
  }
  return {BpeModel(std::move(merges)), Vocabulary(std::move(symbols))};
}

}  // namespace d2p
