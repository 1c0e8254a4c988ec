#include "d2p/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "d2p/rng.hpp"
#include "d2p/tokens.hpp"

namespace d2p {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  for (const auto& l : lines) f << l << '\n';
  if (!f) throw DataError("failed writing '" + path + "'");
}

std::vector<int> Example::target_input() const {
  std::vector<int> in{kBosId};
  if (!tgt.empty()) in.insert(in.end(), tgt.begin(), tgt.end() - 1);
  return in;
}

std::vector<int> encode_sentence(const BpeModel& bpe, const Vocabulary& vocab,
                                 const std::string& line) {
  auto ids = vocab.encode(bpe.apply(line));
  ids.push_back(kEosId);
  return ids;
}

std::vector<Example> encode_parallel(const BpeModel& bpe, const Vocabulary& vocab,
                                     const std::vector<std::string>& src_lines,
                                     const std::vector<std::string>& tgt_lines) {
  if (src_lines.size() != tgt_lines.size()) {
    throw DataError("parallel corpus has " + std::to_string(src_lines.size()) +
                    " source lines but " + std::to_string(tgt_lines.size()) + " target lines");
  }
  std::vector<Example> out(src_lines.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = i;
    out[i].src = encode_sentence(bpe, vocab, src_lines[i]);
    out[i].tgt = encode_sentence(bpe, vocab, tgt_lines[i]);
  }
  return out;
}

std::string decode_sentence(const Vocabulary& vocab, const std::vector<int>& ids) {
  return detokenize(vocab.decode(ids));
}

std::vector<Batch> batch_by_tokens(const std::vector<Example>& examples, std::size_t budget,
                                   std::uint64_t seed, std::uint64_t epoch) {
  if (budget == 0) throw ConfigError("batch token budget must be positive");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (examples[i].tokens() > budget) {
      throw DataError("sentence " + std::to_string(examples[i].id) + " has " +
                      std::to_string(examples[i].tokens()) + " tokens, above the batch budget " +
                      std::to_string(budget));
    }
    order[i] = i;
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return examples[a].tokens() < examples[b].tokens();
  });
  std::vector<Batch> batches;
  Batch current;
  for (std::size_t i : order) {
    const std::size_t t = examples[i].tokens();
    if (!current.examples.empty() && current.tokens + t > budget) {
      batches.push_back(std::move(current));
      current = Batch{};
    }
    current.examples.push_back(i);
    current.tokens += t;
  }
  if (!current.examples.empty()) batches.push_back(std::move(current));
  Rng rng(seed_combine(seed, epoch));
  rng.shuffle(batches.begin(), batches.end());
  return batches;
}

FeatureStore FeatureStore::from_d2pf(const D2pfFile& file) {
  FeatureStore s(file.rows, file.cols);
  for (const auto& r : file.records) s.put(r.sentence_id, r.values);
  return s;
}

D2pfFile FeatureStore::to_d2pf() const {
  D2pfFile f;
  f.rows = static_cast<std::uint32_t>(rows_);
  f.cols = static_cast<std::uint32_t>(cols_);
  for (const auto& [id, v] : records_) f.records.push_back({id, v});
  return f;
}

void FeatureStore::put(std::uint64_t id, std::vector<float> values) {
  if (values.size() != rows_ * cols_) {
    throw DataError("features for sentence " + std::to_string(id) + " have " +
                    std::to_string(values.size()) + " values, expected " +
                    std::to_string(rows_ * cols_));
  }
  records_[id] = std::move(values);
}

const std::vector<float>& FeatureStore::get(std::uint64_t id) const {
  auto it = records_.find(id);
  if (it == records_.end()) {
    throw DataError("no feature record for sentence " + std::to_string(id));
  }
  return it->second;
}

namespace {

std::vector<std::string> make_words(Rng& rng, std::size_t n, std::size_t syllables,
                                    std::set<std::string>& taken) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::vector<std::string> words;
  while (words.size() < n) {
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += consonants[rng.below(consonants.size())];
      w += vowels[rng.below(vowels.size())];
    }
    if (taken.insert(w).second) words.push_back(w);
  }
  return words;
}

}  // namespace

ToyCorpus make_toy_corpus(const ToyCorpusOptions& o) {
  if (o.vocab == 0 || o.min_len == 0 || o.max_len < o.min_len) {
    throw ConfigError("toy corpus needs vocab > 0 and 0 < min_len <= max_len");
  }
  Rng rng(seed_combine(o.seed, hash_string("toy-corpus")));
  std::set<std::string> taken;
  const auto src_words = make_words(rng, o.vocab, 2, taken);
  auto tgt_words = make_words(rng, o.vocab, 3, taken);
  rng.shuffle(tgt_words.begin(), tgt_words.end());
  ToyCorpus c;
  for (std::size_t i = 0; i < o.vocab; ++i) c.lexicon[src_words[i]] = tgt_words[i];

  auto sentence = [&](std::string& src, std::string& tgt) {
    const std::size_t len = o.min_len + rng.below(o.max_len - o.min_len + 1);
    src.clear();
    tgt.clear();
    for (std::size_t k = 0; k < len; ++k) {
      const std::size_t w = rng.below(o.vocab);
      if (k) {
        src += ' ';
        tgt += ' ';
      }
      src += src_words[w];
      tgt += tgt_words[w];
    }
  };
  std::string s, t;
  for (std::size_t i = 0; i < o.train; ++i) {
    sentence(s, t);
    c.train_src.push_back(s);
    c.train_tgt.push_back(t);
  }
  for (std::size_t i = 0; i < o.test; ++i) {
    sentence(s, t);
    c.test_src.push_back(s);
    c.test_tgt.push_back(t);
  }
  return c;
}

}  // namespace d2p
