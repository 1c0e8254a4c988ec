#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "d2p/config.hpp"
#include "d2p/pipeline.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace d2p;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "d2p_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string p(const std::string& name) { return (scratch() / name).string(); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const std::string kToyConfig = std::string(D2P_SOURCE_DIR) + "/configs/toy.cfg";

const std::vector<std::string> kCommands = {"toy-corpus", "bpe-learn",       "bpe-apply",
                                            "features",   "train",           "translate",
                                            "score",      "avg-checkpoints", "gradcheck",
                                            "ablate"};

// Small toy pipeline shared by the tests below; built once.
void prepare_data() {
  static bool done = false;
  if (done) return;
  REQUIRE(run({"toy-corpus", "--out", p("data"), "--train", "120", "--test", "12"}).code == 0);
  REQUIRE(run({"bpe-learn", "--input", p("data/train.src"), p("data/train.tgt"), "--merges",
               "1000", "--out", p("bpe.model")})
              .code == 0);
  REQUIRE(run({"features", "--input", p("data/train.src"), "--out", p("train.rec.d2pf")}).code == 0);
  REQUIRE(run({"features", "--input", p("data/train.src"), "--mode", "authentic", "--out",
               p("train.aut.d2pf")})
              .code == 0);
  REQUIRE(run({"features", "--input", p("data/test.src"), "--out", p("test.rec.d2pf")}).code == 0);
  done = true;
}

std::vector<std::string> train_args(const std::string& out) {
  return {"train",      "--config", kToyConfig, "--bpe", p("bpe.model"), "--src",
          p("data/train.src"), "--tgt", p("data/train.tgt"), "--features", p("train.rec.d2pf"),
          "--authentic", p("train.aut.d2pf"), "--epochs", "1", "--log-every", "0", "--out", out};
}

}  // namespace

TEST_CASE("cli: shipped toy config equals the built-in toy settings") {
  TrainConfig c;
  apply_config(c, read_config_file(kToyConfig));
  CHECK(config_values(c) == config_values(toy_train_config()));
}

TEST_CASE("cli: score of a file against itself is BLEU 1") {
  write_lines(p("same.txt"), {"a b c d", "the cat sat"});
  const auto r = run({"score", "--hyp", p("same.txt"), "--ref", p("same.txt")});
  CHECK(r.code == 0);
  CHECK(r.out.find("bleu=1.000000000") != std::string::npos);
}

TEST_CASE("cli: missing config file is a data error naming the path") {
  const auto r = run({"train", "--config", "missing.cfg", "--bpe", "b", "--src", "s", "--tgt", "t",
                      "--features", "f", "--authentic", "a", "--out", p("never")});
  CHECK(r.code == 2);
  CHECK(r.err.find("missing.cfg") != std::string::npos);
  CHECK_FALSE(fs::exists(p("never")));
}

TEST_CASE("cli: help on every command, unknown flags rejected") {
  for (const auto& cmd : kCommands) {
    CAPTURE(cmd);
    const auto h = run({cmd, "--help"});
    CHECK(h.code == 0);
    CHECK(h.out.find("Usage: d2p-mmt " + cmd) != std::string::npos);
    CHECK(run({cmd, "--no-such-flag"}).code == 1);
  }
  const auto top = run({"--help"});
  CHECK(top.code == 0);
  for (const auto& cmd : kCommands) CHECK(top.out.find(cmd) != std::string::npos);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
}

TEST_CASE("cli: exit codes for usage and data errors") {
  CHECK(run({"bpe-learn", "--input", "x", "--out", p("m"), "--merges", "many"}).code == 1);
  CHECK(run({"score", "--hyp", p("nope.txt"), "--ref", p("nope.txt")}).code == 2);
  write_lines(p("one.txt"), {"a"});
  write_lines(p("two.txt"), {"a", "b"});
  const auto mismatch = run({"score", "--hyp", p("one.txt"), "--ref", p("two.txt")});
  CHECK(mismatch.code == 2);
  CHECK(run({"score", "--hyp", p("one.txt"), "--ref", p("one.txt"), "--smoothing", "x"}).code == 1);
  write_lines(p("junk.d2pf"), {"not a feature file"});
  const auto bad = run({"features", "--validate", p("junk.d2pf")});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("junk.d2pf") != std::string::npos);
  CHECK(run({"features", "--validate", p("junk.d2pf"), "--out", p("x")}).code == 1);
  CHECK(run({"features", "--input", p("one.txt"), "--mode", "dream", "--out", p("x")}).code == 1);
}

TEST_CASE("cli: D2P_SEED replaces the default seed") {
  ::setenv("D2P_SEED", "5", 1);
  REQUIRE(run({"toy-corpus", "--out", p("seed5"), "--train", "10", "--test", "2"}).code == 0);
  ::setenv("D2P_SEED", "bad", 1);
  CHECK(run({"toy-corpus", "--out", p("seedbad"), "--train", "10", "--test", "2"}).code == 1);
  ::unsetenv("D2P_SEED");
  REQUIRE(run({"toy-corpus", "--out", p("seed47"), "--train", "10", "--test", "2"}).code == 0);
  REQUIRE(run({"toy-corpus", "--out", p("seed5b"), "--train", "10", "--test", "2", "--seed", "5"}).code == 0);
  CHECK(slurp(p("seed5/train.src")) == slurp(p("seed5b/train.src")));
  CHECK(slurp(p("seed5/train.src")) != slurp(p("seed47/train.src")));
  const auto m = nlohmann::json::parse(slurp(p("seed5/manifest.json")));
  CHECK(m["seed"] == 5);
}

TEST_CASE("cli: features validate and are reproducible") {
  prepare_data();
  const auto v = run({"features", "--validate", p("train.rec.d2pf")});
  CHECK(v.code == 0);
  CHECK(v.out.find("120 records of 8 x 16") != std::string::npos);
  REQUIRE(run({"features", "--input", p("data/train.src"), "--out", p("again.d2pf")}).code == 0);
  CHECK(slurp(p("again.d2pf")) == slurp(p("train.rec.d2pf")));
  REQUIRE(run({"features", "--input", p("data/train.src"), "--mode", "noise", "--out",
               p("noise.d2pf")})
              .code == 0);
  CHECK(slurp(p("noise.d2pf")) != slurp(p("train.rec.d2pf")));
  const auto m = nlohmann::json::parse(slurp(p("train.rec.d2pf.manifest.json")));
  CHECK(m["inputs"][0]["path"] == p("data/train.src"));
  CHECK(m["inputs"][0]["fnv1a64"].get<std::string>().size() == 16);
  CHECK(m["features"]["seed"] == 47);
}

TEST_CASE("cli: train precedence, manifest, bit-identical replay, translate, score") {
  prepare_data();
  auto args = train_args(p("run_a"));
  args.insert(args.end(), {"--set", "lr=0.002"});
  const auto a = run(args);
  REQUIRE(a.code == 0);
  // flag > config > default, logged at startup
  CHECK(a.err.find("config epochs = 1  [flag]") != std::string::npos);
  CHECK(a.err.find("config lr = 0.002  [flag]") != std::string::npos);
  CHECK(a.err.find("config d_model = 32  [config " + kToyConfig + "]") != std::string::npos);
  CHECK(a.err.find("config beta1 = 0.9  [default]") != std::string::npos);
  CHECK(a.err.find("config vocab = ") != std::string::npos);

  const auto m = nlohmann::json::parse(slurp(p("run_a/manifest.json")));
  CHECK(m["config"]["epochs"] == "1");
  CHECK(m["config_source"]["lr"] == "flag");
  CHECK(m["seed"] == 47);
  CHECK(m["inputs"].size() == 6);  // config, bpe, two feature files, src, tgt
  CHECK(fs::exists(p("run_a/epoch1.d2pc")));

  auto again = train_args(p("run_b"));
  again.insert(again.end(), {"--set", "lr=0.002"});
  REQUIRE(run(again).code == 0);
  CHECK(slurp(p("run_a/last.d2pc")) == slurp(p("run_b/last.d2pc")));

  const std::vector<std::string> tr = {"translate", "--checkpoint", p("run_a/last.d2pc"), "--bpe",
                                       p("bpe.model"), "--input", p("data/test.src"), "--out",
                                       p("hyp.txt")};
  REQUIRE(run(tr).code == 0);
  auto tr2 = tr;
  tr2.back() = p("hyp2.txt");
  tr2.insert(tr2.end(), {"--features", p("test.rec.d2pf")});
  REQUIRE(run(tr2).code == 0);
  CHECK(slurp(p("hyp.txt")) == slurp(p("hyp2.txt")));
  CHECK(read_lines(p("hyp.txt")).size() == 12);

  const auto s = run({"score", "--hyp", p("hyp.txt"), "--ref", p("data/test.tgt"), "--out",
                      p("score.txt")});
  CHECK(s.code == 0);
  CHECK(slurp(p("score.txt")) == s.out);
  CHECK(fs::exists(p("score.txt.manifest.json")));

  const auto avg = run({"avg-checkpoints", "--input", p("run_a/last.d2pc"), p("run_b/last.d2pc"),
                        "--out", p("avg.d2pc")});
  CHECK(avg.code == 0);
  CHECK(slurp(p("avg.d2pc")).size() > 0);

  // Wrong vocabulary for the checkpoint.
  write_lines(p("tiny.txt"), {"ab ab"});
  REQUIRE(run({"bpe-learn", "--input", p("tiny.txt"), "--out", p("tiny.bpe")}).code == 0);
  auto wrong = tr;
  wrong[4] = p("tiny.bpe");
  CHECK(run(wrong).code == 2);
}

TEST_CASE("cli: non-finite config values are usage errors") {
  prepare_data();
  auto args = train_args(p("run_nan"));
  args.insert(args.end(), {"--set", "lr=nan"});
  const auto r = run(args);
  CHECK(r.code == 1);
  CHECK(r.err.find("'lr'") != std::string::npos);
}
