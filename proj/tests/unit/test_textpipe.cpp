#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "d2p/bpe.hpp"
#include "d2p/corpus.hpp"
#include "d2p/d2pf.hpp"
#include "d2p/rng.hpp"
#include "d2p/tokens.hpp"
#include "doctest.h"

using namespace d2p;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "d2p_test_textpipe";
  std::filesystem::create_directories(dir);
  return dir / name;
}

D2pfFile random_file(std::size_t count, std::uint32_t k, std::uint32_t d, std::uint64_t seed) {
  Rng rng(seed);
  D2pfFile f{k, d, {}};
  for (std::size_t i = 0; i < count; ++i) {
    FeatureRecord r{i * 7 + 3, std::vector<float>(k * d)};
    for (auto& v : r.values) v = static_cast<float>(rng.normal());
    f.records.push_back(std::move(r));
  }
  return f;
}

void require_kind(const std::vector<unsigned char>& bytes, D2pfErrorKind kind) {
  try {
    decode_d2pf(bytes);
    FAIL("decode accepted a malformed file");
  } catch (const D2pfError& e) {
    INFO(e.what());
    CHECK(e.d2pf_kind() == kind);
  }
}

void put_u32_at(std::vector<unsigned char>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<unsigned char>(v >> (8 * i));
}

}  // namespace

TEST_CASE("bpe merges the most frequent pair and segments leftmost first") {
  const std::vector<std::string> corpus{"aaab"};
  const auto bpe = BpeModel::learn(corpus, 1);
  REQUIRE(bpe.merges().size() == 1);
  CHECK(bpe.merges()[0] == BpeModel::Pair{"a", "a"});
  CHECK(bpe.apply("aaab") == std::vector<std::string>{"aa", "a", "b</w>"});
}

TEST_CASE("bpe with zero merges yields characters with the word-end marker") {
  const std::vector<std::string> corpus{"hello world", "hello"};
  const auto bpe = BpeModel::learn(corpus, 0);
  CHECK(bpe.merges().empty());
  CHECK(bpe.apply("hi yo") == std::vector<std::string>{"h", "i</w>", "y", "o</w>"});
  CHECK(bpe.apply("") .empty());
  CHECK_THROWS_AS(BpeModel::learn(corpus, -1), ConfigError);
  CHECK_THROWS_AS(BpeModel::learn(std::vector<std::string>{"  ", ""}, 5), DataError);
}

TEST_CASE("bpe stops once pairs fall below the minimum frequency") {
  const std::vector<std::string> corpus{"ab ab cd"};
  const auto bpe = BpeModel::learn(corpus, 10);
  // (a, b</w>) occurs twice, (c, d</w>) once.
  REQUIRE(bpe.merges().size() == 1);
  CHECK(bpe.merges()[0] == BpeModel::Pair{"a", "b</w>"});
  CHECK(BpeModel::learn(corpus, 10, 1).merges().size() == 2);
}

TEST_CASE("bpe ties break toward the lexicographically smaller pair") {
  const std::vector<std::string> corpus{"xy ab"};
  const auto bpe = BpeModel::learn(corpus, 1, 1);
  REQUIRE(bpe.merges().size() == 1);
  CHECK(bpe.merges()[0] == BpeModel::Pair{"a", "b</w>"});
}

TEST_CASE("bpe learning is deterministic and segmentation is idempotent") {
  const auto toy = make_toy_corpus({.vocab = 12, .train = 200, .test = 10});
  std::vector<std::string> joint = toy.train_src;
  joint.insert(joint.end(), toy.train_tgt.begin(), toy.train_tgt.end());
  const auto a = BpeModel::learn(joint, 40);
  const auto b = BpeModel::learn(joint, 40);
  CHECK(a.merges() == b.merges());
  for (const auto& line : toy.test_src) {
    const auto tokens = a.apply(line);
    CHECK(detokenize(tokens) == line);
    CHECK(a.apply(detokenize(tokens)) == tokens);
  }
  CHECK(detokenize(a.apply("  zz\t qq ")) == "zz qq");
}

TEST_CASE("utf8 words split into code points") {
  CHECK(utf8_chars("h\xC3\xA9\xE2\x82\xAC") == std::vector<std::string>{"h", "\xC3\xA9", "\xE2\x82\xAC"});
  CHECK(utf8_chars("\xC3") == std::vector<std::string>{"\xC3"});
}

TEST_CASE("vocabulary reserves specials and round-trips through a file") {
  const std::vector<std::string> corpus{"low lower lowest", "low low"};
  const auto bpe = BpeModel::learn(corpus, 5);
  const auto vocab = Vocabulary::build(bpe, corpus);
  CHECK(vocab.token(kPadId) == "<pad>");
  CHECK(vocab.token(kBosId) == "<s>");
  CHECK(vocab.token(kEosId) == "</s>");
  CHECK(vocab.token(kUnkId) == "<unk>");
  CHECK(vocab.id("<s>") == kUnkId);
  CHECK(vocab.id("never-seen") == kUnkId);
  CHECK_THROWS_AS(vocab.token(static_cast<int>(vocab.size())), ContractError);

  const auto ids = vocab.encode(bpe.apply("lower low"));
  for (int id : ids) CHECK(id >= static_cast<int>(Vocabulary::kSpecials));
  CHECK(detokenize(vocab.decode(ids)) == "lower low");

  const auto path = scratch("model.bpe").string();
  save_bpe(path, bpe, vocab);
  const auto [bpe2, vocab2] = load_bpe(path);
  CHECK(bpe2.merges() == bpe.merges());
  CHECK(vocab2.symbols() == vocab.symbols());
  CHECK(vocab2.encode(bpe2.apply("lower low")) == ids);

  std::ofstream(path) << "d2p-bpe 1\nmerges 3\na b\n";
  CHECK_THROWS_AS(load_bpe(path), DataError);
  CHECK_THROWS_AS(load_bpe(scratch("absent.bpe").string()), DataError);
}

TEST_CASE("d2pf round trip is bit exact") {
  D2pfFile f{2, 3, {}};
  f.records.push_back({11, {1.5f, -0.0f, 3.25e-20f, 7.0f, -1e30f, 0.1f}});
  f.records.push_back({4, {0.f, 1.f, 2.f, 3.f, 4.f, 5.f}});
  const auto bytes = encode_d2pf(f);
  CHECK(bytes.size() == 24 + 2 * 16 + 2 * 24);
  CHECK(std::memcmp(bytes.data(), "D2PF", 4) == 0);
  const auto back = decode_d2pf(bytes);
  REQUIRE(back.records.size() == 2);
  CHECK(back.rows == 2);
  CHECK(back.cols == 3);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.records[i].sentence_id == f.records[i].sentence_id);
    CHECK(std::memcmp(back.records[i].values.data(), f.records[i].values.data(), 24) == 0);
  }
  CHECK(encode_d2pf(back) == bytes);

  const auto path = scratch("two.d2pf").string();
  write_d2pf(path, f);
  const auto summary = validate_d2pf(path);
  CHECK(summary.records == 2);
  CHECK(summary.bytes == std::filesystem::file_size(path));
}

TEST_CASE("d2pf rejects malformed files with a specific kind") {
  const auto good = encode_d2pf(random_file(3, 2, 2, 5));

  auto cut = good;
  cut.pop_back();
  require_kind(cut, D2pfErrorKind::kTruncated);
  require_kind({good.begin(), good.begin() + 10}, D2pfErrorKind::kTruncated);
  require_kind({good.begin(), good.begin() + 40}, D2pfErrorKind::kTruncated);

  auto magic = good;
  magic[0] = 'X';
  require_kind(magic, D2pfErrorKind::kBadMagic);

  auto version = good;
  put_u32_at(version, 4, 2);
  require_kind(version, D2pfErrorKind::kVersion);

  auto dtype = good;
  put_u32_at(dtype, 8, 2);
  require_kind(dtype, D2pfErrorKind::kDType);

  auto offset = good;
  offset[24 + 16 + 8] ^= 0x04;  // second record offset
  require_kind(offset, D2pfErrorKind::kIndex);

  auto dup = good;
  std::memcpy(dup.data() + 24 + 16, dup.data() + 24, 8);
  require_kind(dup, D2pfErrorKind::kIndex);

  auto trailing = good;
  trailing.push_back(0);
  require_kind(trailing, D2pfErrorKind::kIndex);

  auto nan = good;
  put_u32_at(nan, nan.size() - 4, 0x7FC00000u);
  require_kind(nan, D2pfErrorKind::kNonFinite);

  D2pfFile bad{1, 2, {{1, {1.f}}}};
  CHECK_THROWS_AS(encode_d2pf(bad), D2pfError);

  try {
    read_d2pf(scratch("missing.d2pf").string());
    FAIL("missing file accepted");
  } catch (const D2pfError& e) {
    CHECK(e.d2pf_kind() == D2pfErrorKind::kIo);
  }
}

TEST_CASE("d2pf preserves a thousand records") {
  const auto f = random_file(1000, 8, 16, 99);
  const auto path = scratch("many.d2pf").string();
  write_d2pf(path, f);
  const auto back = read_d2pf(path);
  REQUIRE(back.records.size() == 1000);
  std::uint64_t sum_a = 0, sum_b = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(back.records[i].sentence_id == f.records[i].sentence_id);
    for (std::size_t j = 0; j < f.records[i].values.size(); ++j) {
      std::uint32_t a, b;
      std::memcpy(&a, &f.records[i].values[j], 4);
      std::memcpy(&b, &back.records[i].values[j], 4);
      sum_a = mix64(sum_a ^ a);
      sum_b = mix64(sum_b ^ b);
    }
  }
  CHECK(sum_a == sum_b);
}

TEST_CASE("feature store maps ids to matrices") {
  FeatureStore store(2, 2);
  store.put(5, {1, 2, 3, 4});
  CHECK(store.get(5)[3] == 4.f);
  CHECK_THROWS_AS(store.put(6, {1, 2, 3}), DataError);
  try {
    store.get(42);
    FAIL("missing id accepted");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
  const auto again = FeatureStore::from_d2pf(decode_d2pf(encode_d2pf(store.to_d2pf())));
  CHECK(again.get(5) == store.get(5));
}

TEST_CASE("token batching covers every sentence once within the budget") {
  const auto toy = make_toy_corpus({.train = 300, .test = 0});
  std::vector<std::string> joint = toy.train_src;
  joint.insert(joint.end(), toy.train_tgt.begin(), toy.train_tgt.end());
  const auto bpe = BpeModel::learn(joint, 400);
  const auto vocab = Vocabulary::build(bpe, joint);
  const auto examples = encode_parallel(bpe, vocab, toy.train_src, toy.train_tgt);
  for (const auto& e : examples) {
    CHECK(e.src.back() == kEosId);
    CHECK(e.tgt.back() == kEosId);
    CHECK(e.target_input().front() == kBosId);
    CHECK(e.target_input().size() == e.tgt.size());
  }
  for (std::size_t budget : {20, 64, 2048}) {
    const auto batches = batch_by_tokens(examples, budget, 47, 0);
    std::vector<int> seen(examples.size(), 0);
    for (const auto& b : batches) {
      std::size_t tokens = 0;
      for (auto i : b.examples) {
        ++seen[i];
        tokens += examples[i].tokens();
      }
      CHECK(tokens == b.tokens);
      CHECK(tokens <= budget);
    }
    for (int s : seen) CHECK(s == 1);
  }
  const auto a = batch_by_tokens(examples, 64, 47, 3);
  const auto b = batch_by_tokens(examples, 64, 47, 3);
  const auto c = batch_by_tokens(examples, 64, 47, 4);
  REQUIRE(a.size() == b.size());
  bool same_order = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].examples == b[i].examples);
    same_order = same_order && a[i].examples == c[i].examples;
  }
  CHECK_FALSE(same_order);

  const std::vector<Example> one(examples.begin(), examples.begin() + 1);
  CHECK(batch_by_tokens(one, 2048, 1, 0).size() == 1);
  CHECK_THROWS_AS(batch_by_tokens(examples, 4, 1, 0), DataError);
  CHECK_THROWS_AS(encode_parallel(bpe, vocab, toy.train_src, {}), DataError);
}

TEST_CASE("toy corpus is a seeded word-for-word translation") {
  const auto a = make_toy_corpus({});
  const auto b = make_toy_corpus({});
  CHECK(a.train_src.size() == 2000);
  CHECK(a.test_src.size() == 200);
  CHECK(a.train_src == b.train_src);
  CHECK(a.lexicon.size() == 20);
  std::set<std::string> targets;
  for (const auto& [s, t] : a.lexicon) {
    targets.insert(t);
    CHECK(a.lexicon.count(t) == 0);
  }
  CHECK(targets.size() == 20);
  for (std::size_t i = 0; i < a.train_src.size(); ++i) {
    const auto src = split_words(a.train_src[i]);
    const auto tgt = split_words(a.train_tgt[i]);
    REQUIRE(src.size() == tgt.size());
    CHECK(src.size() >= 3);
    CHECK(src.size() <= 8);
    for (std::size_t k = 0; k < src.size(); ++k) CHECK(a.lexicon.at(src[k]) == tgt[k]);
  }
  const auto other = make_toy_corpus({.seed = 48});
  CHECK(other.train_src != a.train_src);
}
