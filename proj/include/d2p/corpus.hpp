#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "d2p/bpe.hpp"
#include "d2p/d2pf.hpp"

namespace d2p {

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

// One parallel sentence pair as ids; both sides end with EOS.
struct Example {
  std::uint64_t id = 0;  // 0-based line number
  std::vector<int> src;
  std::vector<int> tgt;

  std::size_t tokens() const { return src.size() + tgt.size(); }
  std::vector<int> target_input() const;  // BOS + tgt without the final EOS
};

std::vector<int> encode_sentence(const BpeModel& bpe, const Vocabulary& vocab,
                                 const std::string& line);

std::vector<Example> encode_parallel(const BpeModel& bpe, const Vocabulary& vocab,
                                     const std::vector<std::string>& src_lines,
                                     const std::vector<std::string>& tgt_lines);

// Detokenized text of an id sequence (specials dropped).
std::string decode_sentence(const Vocabulary& vocab, const std::vector<int>& ids);

struct Batch {
  std::vector<std::size_t> examples;  // indices into the example list
  std::size_t tokens = 0;             // non-PAD source + target tokens
};

// Length-sorted greedy bucketing under a token budget, batch order shuffled
// by (seed, epoch). Every example lands in exactly one batch.
std::vector<Batch> batch_by_tokens(const std::vector<Example>& examples, std::size_t budget,
                                   std::uint64_t seed, std::uint64_t epoch);

// Sentence id -> K x D feature matrix.
class FeatureStore {
 public:
  FeatureStore() = default;
  FeatureStore(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {}
  static FeatureStore from_d2pf(const D2pfFile& file);
  D2pfFile to_d2pf() const;

  void put(std::uint64_t id, std::vector<float> values);
  // Throws DataError naming the sentence when absent.
  const std::vector<float>& get(std::uint64_t id) const;
  bool contains(std::uint64_t id) const { return records_.count(id) != 0; }
  std::size_t size() const { return records_.size(); }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::map<std::uint64_t, std::vector<float>> records_;
};

// Synthetic parallel corpus: sentences of `min_len`..`max_len` words drawn
// from a source vocabulary, translated word by word through a fixed
// bijection onto a disjoint target vocabulary.
struct ToyCorpusOptions {
  std::size_t vocab = 20;
  std::size_t train = 2000;
  std::size_t test = 200;
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::uint64_t seed = 47;
};

struct ToyCorpus {
  std::vector<std::string> train_src, train_tgt, test_src, test_tgt;
  std::map<std::string, std::string> lexicon;
};

ToyCorpus make_toy_corpus(const ToyCorpusOptions& options);

}  // namespace d2p
