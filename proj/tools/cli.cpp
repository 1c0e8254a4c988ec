#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "d2p/bleu.hpp"
#include "d2p/checkpoint.hpp"
#include "d2p/config.hpp"
#include "d2p/corpus.hpp"
#include "d2p/d2pf.hpp"
#include "d2p/diffusion.hpp"
#include "d2p/error.hpp"
#include "d2p/gradsuite.hpp"
#include "d2p/pipeline.hpp"
#include "d2p/train.hpp"
#include "d2p/translate.hpp"
#include "json.hpp"

namespace d2p::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::uint64_t default_seed() {
  const char* env = std::getenv("D2P_SEED");
  if (env == nullptr || *env == '\0') return 47;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("D2P_SEED must be an unsigned integer, got '") + env + "'");
  }
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Resolved settings, seeds and input checksums of one run.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args) {
    doc_["command"] = std::move(command);
    doc_["args"] = args;
    doc_["started"] = now_utc();
    doc_["inputs"] = ordered_json::array();
    doc_["outputs"] = ordered_json::array();
  }
  void input(const std::string& path) {
    const std::string bytes = read_bytes(path);
    doc_["inputs"].push_back(
        {{"path", path}, {"bytes", bytes.size()}, {"fnv1a64", hex64(hash_string(bytes))}});
  }
  void output(const std::string& path) { doc_["outputs"].push_back(path); }
  ordered_json& operator[](const std::string& key) { return doc_[key]; }
  void write(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << doc_.dump(2) << "\n";
  }

 private:
  ordered_json doc_;
};

std::string manifest_beside(const std::string& output) { return output + ".manifest.json"; }

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// Config values tagged with the layer that set them.
struct ResolvedConfig {
  ConfigMap values;
  std::map<std::string, std::string> source;

  void layer(const ConfigMap& m, const std::string& origin) {
    const auto known = config_keys();
    for (const auto& [k, v] : m) {
      if (std::find(known.begin(), known.end(), k) == known.end()) {
        throw ConfigError("unknown config key '" + k + "' in " + origin);
      }
      values[k] = v;
      source[k] = origin;
    }
  }
  bool explicitly_set(const std::string& key) const {
    const auto it = source.find(key);
    return it != source.end() && it->second != "default" && it->second != "env D2P_SEED";
  }
  TrainConfig build() const {
    TrainConfig c;
    apply_config(c, values);
    c.validate();
    return c;
  }
  void log(std::ostream& os) const {
    for (const auto& [k, v] : values) os << "config " << k << " = " << v << "  [" << source.at(k) << "]\n";
  }
};

ResolvedConfig base_config(const TrainConfig& defaults) {
  ResolvedConfig r;
  TrainConfig d = defaults;
  const char* env = std::getenv("D2P_SEED");
  const bool from_env = env != nullptr && *env != '\0';
  d.seed = default_seed();
  r.layer(config_values(d), "default");
  if (from_env) r.source["seed"] = "env D2P_SEED";
  return r;
}

ConfigMap parse_assignments(const std::vector<std::string>& sets) {
  ConfigMap m;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + s + "'");
    }
    auto trim = [](std::string x) {
      const auto a = x.find_first_not_of(" \t");
      const auto b = x.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : x.substr(a, b - a + 1);
    };
    m[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
  }
  return m;
}

// Flag shortcuts for common config keys; empty strings are unset.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> shortcuts;  // key -> value

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "config file of key = value lines");
    app->add_option("--set", sets, "config override key=value (repeatable)");
    for (const auto& [flag, key] : kShortcuts) {
      app->add_option(flag, shortcuts[key], "sets config key '" + key + "'");
    }
  }
  ResolvedConfig resolve(const TrainConfig& defaults, Manifest* manifest) const {
    ResolvedConfig r = base_config(defaults);
    if (!config_path.empty()) {
      r.layer(read_config_file(config_path), "config " + config_path);
      if (manifest != nullptr) manifest->input(config_path);
    }
    ConfigMap flags = parse_assignments(sets);
    for (const auto& [key, value] : shortcuts) {
      if (!value.empty()) flags[key] = value;
    }
    r.layer(flags, "flag");
    return r;
  }

  inline static const std::vector<std::pair<std::string, std::string>> kShortcuts = {
      {"--seed", "seed"},         {"--epochs", "epochs"},   {"--lr", "lr"},
      {"--lambda", "lambda"},     {"--max-updates", "max_updates"},
      {"--batch-tokens", "batch_tokens"}, {"--dtype", "dtype"}, {"--beam", "beam"}};
};

FeatureStore load_features(const std::string& path, Manifest& manifest) {
  manifest.input(path);
  return FeatureStore::from_d2pf(read_d2pf(path));
}

// ---------------------------------------------------------------------------
// Commands. Each one parses into a struct, then runs after CLI11 succeeds.

struct ToyCorpusCmd {
  std::string out;
  ToyCorpusOptions o;
  std::string seed;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("toy-corpus", "write the synthetic word-mapping parallel corpus");
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--vocab", o.vocab, "source word types")->capture_default_str();
    c->add_option("--train", o.train, "training pairs")->capture_default_str();
    c->add_option("--test", o.test, "test pairs")->capture_default_str();
    c->add_option("--min-len", o.min_len, "shortest sentence in words")->capture_default_str();
    c->add_option("--max-len", o.max_len, "longest sentence in words")->capture_default_str();
    c->add_option("--seed", seed, "corpus seed (default D2P_SEED or 47)");
  }
  int run(const std::vector<std::string>& args, std::ostream& out_s) {
    o.seed = seed.empty() ? default_seed() : std::stoull(seed);
    const ToyCorpus c = make_toy_corpus(o);
    fs::create_directories(out);
    Manifest m("toy-corpus", args);
    m["seed"] = o.seed;
    const std::vector<std::pair<std::string, const std::vector<std::string>*>> files = {
        {"train.src", &c.train_src}, {"train.tgt", &c.train_tgt},
        {"test.src", &c.test_src},   {"test.tgt", &c.test_tgt}};
    for (const auto& [name, lines] : files) {
      const std::string p = (fs::path(out) / name).string();
      write_lines(p, *lines);
      m.output(p);
    }
    std::vector<std::string> lex;
    for (const auto& [s, t] : c.lexicon) lex.push_back(s + "\t" + t);
    const std::string lp = (fs::path(out) / "lexicon.tsv").string();
    write_lines(lp, lex);
    m.output(lp);
    m.write((fs::path(out) / "manifest.json").string());
    out_s << "wrote " << c.train_src.size() << " train and " << c.test_src.size()
          << " test pairs to " << out << "\n";
    return kOk;
  }
};

struct BpeLearnCmd {
  std::vector<std::string> inputs;
  std::string out;
  long merges = 10000;
  std::size_t min_frequency = 2;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("bpe-learn", "learn joint BPE merges and the shared vocabulary");
    c->add_option("--input", inputs, "training text files, one sentence per line")->required();
    c->add_option("--out", out, "model file")->required();
    c->add_option("--merges", merges, "number of merge operations")->capture_default_str();
    c->add_option("--min-frequency", min_frequency, "stop when the best pair is rarer")
        ->capture_default_str();
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    if (merges < 0) throw ConfigError("--merges must be non-negative");
    Manifest m("bpe-learn", args);
    std::vector<std::string> lines;
    for (const auto& p : inputs) {
      const auto l = read_lines(p);
      lines.insert(lines.end(), l.begin(), l.end());
      m.input(p);
    }
    const BpeModel bpe = BpeModel::learn(lines, merges, min_frequency);
    const Vocabulary vocab = Vocabulary::build(bpe, lines);
    ensure_parent(out);
    save_bpe(out, bpe, vocab);
    m.output(out);
    m["merges"] = bpe.merges().size();
    m["vocab"] = vocab.size();
    m.write(manifest_beside(out));
    os << "learned " << bpe.merges().size() << " merges, vocabulary " << vocab.size() << "\n";
    return kOk;
  }
};

struct BpeApplyCmd {
  std::string model, input, out;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("bpe-apply", "segment text into subword tokens");
    c->add_option("--model", model, "model file from bpe-learn")->required();
    c->add_option("--input", input, "text file")->required();
    c->add_option("--out", out, "segmented output file")->required();
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    Manifest m("bpe-apply", args);
    const auto [bpe, vocab] = load_bpe(model);
    m.input(model);
    const auto lines = read_lines(input);
    m.input(input);
    std::vector<std::string> seg;
    for (const auto& l : lines) {
      std::string s;
      for (const auto& t : bpe.apply(l)) s += (s.empty() ? "" : " ") + t;
      seg.push_back(s);
    }
    ensure_parent(out);
    write_lines(out, seg);
    m.output(out);
    m.write(manifest_beside(out));
    os << "segmented " << lines.size() << " lines\n";
    return kOk;
  }
};

struct FeatureFlags {
  FeatureConfig f;
  std::string seed, rule = "verbatim";
  void add(CLI::App* c) {
    c->add_option("--steps", f.steps, "diffusion steps")->capture_default_str();
    c->add_option("--sigma", f.prior_sigma, "authentic-image spread around its mean")
        ->capture_default_str();
    c->add_option("--cond-dim", f.cond_dim, "text condition width")->capture_default_str();
    c->add_option("--rule", rule, "reverse step: verbatim or ddpm")->capture_default_str();
    c->add_option("--feature-seed", seed, "generator seed (default D2P_SEED or 47)");
  }
  FeatureConfig resolve(std::size_t rows, std::size_t dim) const {
    FeatureConfig c = f;
    c.rows = rows;
    c.dim = dim;
    c.seed = seed.empty() ? default_seed() : std::stoull(seed);
    if (rule == "verbatim") {
      c.rule = ReverseRule::kVerbatim;
    } else if (rule == "ddpm") {
      c.rule = ReverseRule::kStandardDdpm;
    } else {
      throw ConfigError("--rule must be verbatim or ddpm, got '" + rule + "'");
    }
    return c;
  }
  void record(Manifest& m, const FeatureConfig& c) const {
    m["features"] = {{"rows", c.rows}, {"dim", c.dim},   {"cond_dim", c.cond_dim},
                     {"steps", c.steps}, {"sigma", c.prior_sigma}, {"rule", rule},
                     {"seed", c.seed}};
  }
};

struct FeaturesCmd {
  std::string input, out, validate, mode = "reconstructed";
  std::size_t rows = 8, dim = 16;
  FeatureFlags ff;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand(
        "features", "generate K x D sentence features with the toy diffusion model, or validate a D2PF file");
    auto* in = c->add_option("--input", input, "source sentences, one per line");
    auto* o = c->add_option("--out", out, "D2PF output file");
    auto* v = c->add_option("--validate", validate, "check a D2PF file and print its summary");
    v->excludes(in)->excludes(o);
    c->add_option("--mode", mode, "reconstructed, noise or authentic")->capture_default_str();
    c->add_option("--rows", rows, "K, feature rows per sentence")->capture_default_str();
    c->add_option("--dim", dim, "D, feature width")->capture_default_str();
    ff.add(c);
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    if (!validate.empty()) {
      const D2pfSummary s = validate_d2pf(validate);
      os << "ok " << validate << ": " << s.records << " records of " << s.rows << " x " << s.cols
         << ", " << s.bytes << " bytes\n";
      return kOk;
    }
    if (input.empty() || out.empty()) {
      throw ConfigError("features needs --input and --out, or --validate");
    }
    const FeatureMode fm = parse_feature_mode(mode);
    const FeatureConfig fc = ff.resolve(rows, dim);
    Manifest m("features", args);
    const auto lines = read_lines(input);
    m.input(input);
    const FeatureStore store = make_feature_store(FeatureProvider(fc), lines, fm);
    ensure_parent(out);
    write_d2pf(out, store.to_d2pf());
    m.output(out);
    m["mode"] = feature_mode_name(fm);
    ff.record(m, fc);
    m.write(manifest_beside(out));
    os << "wrote " << store.size() << " " << feature_mode_name(fm) << " feature records to " << out
       << "\n";
    return kOk;
  }
};

struct TrainCmd {
  ConfigFlags cf;
  std::string bpe, src, tgt, features, authentic, valid_src, valid_tgt, valid_features, out, resume;
  std::size_t log_every = 50;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "train the dual-branch model");
    cf.add(c);
    c->add_option("--bpe", bpe, "model file from bpe-learn")->required();
    c->add_option("--src", src, "training source sentences")->required();
    c->add_option("--tgt", tgt, "training target sentences")->required();
    c->add_option("--features", features, "D2PF reconstructed features of --src")->required();
    c->add_option("--authentic", authentic, "D2PF authentic features of --src")->required();
    auto* vs = c->add_option("--valid-src", valid_src, "validation source sentences");
    auto* vt = c->add_option("--valid-tgt", valid_tgt, "validation target sentences");
    auto* vf = c->add_option("--valid-features", valid_features,
                             "D2PF reconstructed features of --valid-src");
    vs->needs(vt)->needs(vf);
    vt->needs(vs);
    vf->needs(vs);
    c->add_option("--out", out, "run directory for checkpoints, log and manifest")->required();
    c->add_option("--resume", resume, "checkpoint to continue from");
    c->add_option("--log-every", log_every, "updates between progress lines; 0 = quiet")
        ->capture_default_str();
  }
  int run(const std::vector<std::string>& args, std::ostream& os, std::ostream& err) {
    Manifest m("train", args);
    ResolvedConfig rc = cf.resolve(TrainConfig{}, &m);
    const auto [bpe_model, vocab] = load_bpe(bpe);
    m.input(bpe);
    if (!rc.explicitly_set("vocab")) {
      rc.layer({{"vocab", std::to_string(vocab.size())}}, "bpe " + bpe);
    } else if (rc.values.at("vocab") != std::to_string(vocab.size())) {
      throw ConfigError("config vocab = " + rc.values.at("vocab") + " but " + bpe + " has " +
                        std::to_string(vocab.size()) + " symbols");
    }
    TrainData data;
    data.reconstructed = load_features(features, m);
    data.authentic = load_features(authentic, m);
    for (const auto& [key, n] : {std::pair<std::string, std::size_t>{"feature_len", data.reconstructed.rows()},
                                 {"feature_dim", data.reconstructed.cols()}}) {
      if (!rc.explicitly_set(key)) rc.layer({{key, std::to_string(n)}}, "features " + features);
    }
    const TrainConfig config = rc.build();
    const auto src_lines = read_lines(src);
    const auto tgt_lines = read_lines(tgt);
    m.input(src);
    m.input(tgt);
    data.train = encode_parallel(bpe_model, vocab, src_lines, tgt_lines);
    if (!valid_src.empty()) {
      data.valid = encode_parallel(bpe_model, vocab, read_lines(valid_src), read_lines(valid_tgt));
      m.input(valid_src);
      m.input(valid_tgt);
      data.valid_features = load_features(valid_features, m);
    }
    data.vocab = &vocab;
    std::optional<Checkpoint> start;
    if (!resume.empty()) {
      start = load_checkpoint(resume);
      m.input(resume);
    }
    Trainer trainer(config, data);
    if (start) trainer.resume(*start);

    fs::create_directories(out);
    const std::string log_path = (fs::path(out) / "train.log").string();
    std::ofstream log(log_path, start ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot write " + log_path);
    std::ostringstream header;
    rc.log(header);
    err << header.str();
    log << header.str();
    m["seed"] = config.seed;
    m["config"] = rc.values;
    m["config_source"] = rc.source;

    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
      log << "update " << r.update << " epoch " << r.epoch << " total " << r.total << " sdf "
          << r.sdf << " aut " << r.aut << " consistency " << r.consistency << " lr " << r.lr
          << " tokens " << r.tokens << "\n";
      if (log_every != 0 && r.update % log_every == 0) {
        err << "update " << r.update << " epoch " << r.epoch << " loss " << r.total << "\n";
      }
    };
    hooks.on_epoch = [&](std::uint64_t epoch, Trainer& t) {
      const Checkpoint ck = t.checkpoint();
      const std::string p = (fs::path(out) / ("epoch" + std::to_string(epoch + 1) + ".d2pc")).string();
      save_checkpoint(p, ck);
      save_checkpoint((fs::path(out) / "last.d2pc").string(), ck);
      m.output(p);
      err << "epoch " << epoch + 1 << " done after " << t.updates() << " updates, saved " << p << "\n";
    };
    hooks.on_validation = [&](const ValidationRecord& v) {
      log << "valid epoch " << v.epoch + 1 << " bleu " << v.bleu.bleu << "\n";
      err << "validation BLEU after epoch " << v.epoch + 1 << ": " << 100.0 * v.bleu.bleu << "\n";
    };
    const TrainReport report = run_training(trainer, hooks);
    // max_updates can stop mid-epoch; keep that state too.
    if (trainer.cursor() != 0) {
      save_checkpoint((fs::path(out) / "last.d2pc").string(), trainer.checkpoint());
    }
    m.output((fs::path(out) / "last.d2pc").string());
    m.output(log_path);
    m["updates"] = trainer.updates();
    if (!report.steps.empty()) m["final_loss"] = report.steps.back().total;
    m.write((fs::path(out) / "manifest.json").string());
    os << "trained " << report.steps.size() << " updates";
    if (!report.steps.empty()) os << ", final loss " << report.steps.back().total;
    os << "\n";
    return kOk;
  }
};

struct TranslateCmd {
  std::string checkpoint, bpe, input, out, features, mode = "reconstructed",
                                                    branch = "reconstructed";
  std::size_t beam = 0, extra = 0;
  FeatureFlags ff;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("translate", "beam-search translation with a trained checkpoint");
    c->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    c->add_option("--bpe", bpe, "model file from bpe-learn")->required();
    c->add_option("--input", input, "source sentences")->required();
    c->add_option("--out", out, "translations, one per line")->required();
    c->add_option("--features", features,
                  "D2PF features of --input; generated with --mode when absent");
    c->add_option("--mode", mode, "generated feature mode: reconstructed, noise or authentic")
        ->capture_default_str();
    c->add_option("--branch", branch, "decoding branch: reconstructed or authentic")
        ->capture_default_str();
    c->add_option("--beam", beam, "beam width (default from the checkpoint config)");
    c->add_option("--extra", extra, "length cap beyond the source (default from the checkpoint config)");
    ff.add(c);
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    const Branch b = parse_branch(branch);
    const FeatureMode fm = parse_feature_mode(mode);
    Manifest m("translate", args);
    const LoadedModel lm = load_model(load_checkpoint(checkpoint));
    m.input(checkpoint);
    const auto [bpe_model, vocab] = load_bpe(bpe);
    m.input(bpe);
    if (vocab.size() != lm.config.model.transformer.vocab) {
      throw DataError(bpe + " has " + std::to_string(vocab.size()) + " symbols, checkpoint expects " +
                      std::to_string(lm.config.model.transformer.vocab));
    }
    const auto lines = read_lines(input);
    m.input(input);
    FeatureStore store;
    if (!features.empty()) {
      store = load_features(features, m);
    } else {
      const FeatureConfig fc = ff.resolve(lm.config.model.prompt.feature_len,
                                          lm.config.model.prompt.feature_dim);
      store = make_feature_store(FeatureProvider(fc), lines, fm);
      m["mode"] = feature_mode_name(fm);
      ff.record(m, fc);
    }
    std::vector<std::vector<int>> sources;
    for (const auto& l : lines) sources.push_back(encode_sentence(bpe_model, vocab, l));
    const std::size_t w = beam != 0 ? beam : lm.config.beam;
    const std::size_t x = extra != 0 ? extra : lm.config.decode_extra;
    const auto hyps = translate_corpus(*lm.model, b, sources, store, w, x);
    std::vector<std::string> text;
    std::size_t truncated = 0;
    for (const auto& h : hyps) {
      text.push_back(decode_sentence(vocab, h.tokens));
      truncated += h.truncated ? 1 : 0;
    }
    ensure_parent(out);
    write_lines(out, text);
    m.output(out);
    m["branch"] = branch_name(b);
    m["beam"] = w;
    m["extra"] = x;
    m["truncated"] = truncated;
    m.write(manifest_beside(out));
    os << "translated " << text.size() << " sentences with the " << branch_name(b) << " branch";
    if (truncated != 0) os << ", " << truncated << " hit the length cap";
    os << "\n";
    return kOk;
  }
};

struct ScoreCmd {
  std::string hyp, ref, out, smoothing = "none";
  int max_n = 4;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("score", "corpus BLEU of hypotheses against references");
    c->add_option("--hyp", hyp, "hypothesis file")->required();
    c->add_option("--ref", ref, "reference file")->required();
    c->add_option("--max-n", max_n, "highest n-gram order")->capture_default_str();
    c->add_option("--smoothing", smoothing, "none or add-one")->capture_default_str();
    c->add_option("--out", out, "also write the report and a manifest here");
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    BleuSmoothing s;
    if (smoothing == "none") {
      s = BleuSmoothing::kNone;
    } else if (smoothing == "add-one") {
      s = BleuSmoothing::kAddOne;
    } else {
      throw ConfigError("--smoothing must be none or add-one, got '" + smoothing + "'");
    }
    const BleuReport r = corpus_bleu_lines(read_lines(hyp), read_lines(ref), max_n, s);
    const std::string text = format_bleu(r);
    os << text;
    if (!out.empty()) {
      Manifest m("score", args);
      m.input(hyp);
      m.input(ref);
      ensure_parent(out);
      std::ofstream f(out);
      if (!f) throw DataError("cannot write " + out);
      f << text;
      m.output(out);
      m.write(manifest_beside(out));
    }
    return kOk;
  }
};

struct AverageCmd {
  std::vector<std::string> inputs;
  std::string out;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("avg-checkpoints", "element-wise mean of checkpoint parameters");
    c->add_option("--input", inputs, "checkpoint files")->required();
    c->add_option("--out", out, "averaged checkpoint")->required();
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    Manifest m("avg-checkpoints", args);
    std::vector<Checkpoint> cks;
    for (const auto& p : inputs) {
      cks.push_back(load_checkpoint(p));
      m.input(p);
    }
    ensure_parent(out);
    save_checkpoint(out, average_checkpoints(cks));
    m.output(out);
    m.write(manifest_beside(out));
    os << "averaged " << cks.size() << " checkpoints into " << out << "\n";
    return kOk;
  }
};

struct GradcheckCmd {
  std::size_t instances = 10, samples = 3000;
  std::string dtype = "f32", seed, out;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand(
        "gradcheck", "finite-difference check of every operation and the composed model");
    c->add_option("--instances", instances, "random inputs per operation")->capture_default_str();
    c->add_option("--samples", samples, "composed-model entries perturbed; 0 = all")
        ->capture_default_str();
    c->add_option("--dtype", dtype, "precision of the composed analytic gradient: f32 or f64")
        ->capture_default_str();
    c->add_option("--seed", seed, "seed (default D2P_SEED or 47)");
    c->add_option("--out", out, "also write the report and a manifest here");
  }
  int run(const std::vector<std::string>& args, std::ostream& os) {
    ComposedCheckOptions o;
    if (dtype == "f32") {
      o.analytic = DType::kF32;
    } else if (dtype == "f64") {
      o.analytic = DType::kF64;
    } else {
      throw ConfigError("--dtype must be f32 or f64, got '" + dtype + "'");
    }
    o.samples = samples;
    o.seed = seed.empty() ? default_seed() : std::stoull(seed);
    constexpr double kOpTol = 1e-4;
    const double composed_tol = o.analytic == DType::kF32 ? 1e-3 : 1e-4;
    std::ostringstream text;
    bool ok = true;
    char line[256];
    for (const auto& r : run_op_gradient_checks(instances, o.seed)) {
      const bool pass = r.max_rel_error <= kOpTol;
      ok = ok && pass;
      std::snprintf(line, sizeof line, "%-24s %6zu checked  max rel err %.3e  %s\n", r.name.c_str(),
                    r.checked, r.max_rel_error, pass ? "ok" : "FAIL");
      text << line;
    }
    const GradCheckResult c = composed_gradient_check(o);
    const bool pass = c.max_rel_error <= composed_tol;
    ok = ok && pass;
    std::snprintf(line, sizeof line, "%-24s %6zu checked  max rel err %.3e  %s\n",
                  ("composed-" + dtype).c_str(), c.checked, c.max_rel_error, pass ? "ok" : "FAIL");
    text << line << "worst composed entry: " << c.worst << "\n";
    os << text.str();
    if (!out.empty()) {
      Manifest m("gradcheck", args);
      m["seed"] = o.seed;
      ensure_parent(out);
      std::ofstream f(out);
      if (!f) throw DataError("cannot write " + out);
      f << text.str();
      m.output(out);
      m.write(manifest_beside(out));
    }
    if (!ok) throw NumericError("gradient check above tolerance");
    return kOk;
  }
};

struct AblateCmd {
  ConfigFlags cf;
  std::string out;
  std::vector<std::string> variants;
  ToyCorpusOptions corpus;
  long merges = 1000;
  void add(CLI::App& app) {
    auto* c = app.add_subcommand("ablate", "train every ablation variant on the toy corpus and compare");
    cf.add(c);
    c->add_option("--out", out, "directory for the table and manifest")->required();
    c->add_option("--variant", variants, "variants to run (default all)");
    c->add_option("--train", corpus.train, "toy training pairs")->capture_default_str();
    c->add_option("--test", corpus.test, "toy test pairs")->capture_default_str();
    c->add_option("--merges", merges, "BPE merges")->capture_default_str();
  }
  int run(const std::vector<std::string>& args, std::ostream& os, std::ostream& err) {
    Manifest m("ablate", args);
    TrainConfig defaults = toy_train_config();
    defaults.epochs = 3;
    ResolvedConfig rc = cf.resolve(defaults, &m);
    std::vector<AblationVariant> chosen;
    const auto all = ablation_variants();
    if (variants.empty()) {
      chosen = all;
    } else {
      for (const auto& v : variants) {
        auto it = std::find_if(all.begin(), all.end(), [&](const auto& a) { return a.name == v; });
        if (it == all.end()) {
          std::string names;
          for (const auto& a : all) names += (names.empty() ? "" : ", ") + ("'" + a.name + "'");
          throw ConfigError("unknown variant '" + v + "'; known: " + names);
        }
        chosen.push_back(*it);
      }
    }
    TrainConfig probe = rc.build();
    corpus.seed = probe.seed;
    FeatureConfig fc;
    fc.rows = probe.model.prompt.feature_len;
    fc.dim = probe.model.prompt.feature_dim;
    fc.seed = probe.seed;
    const auto setup = make_toy_setup(corpus, fc, merges);
    rc.layer({{"vocab", std::to_string(setup->vocab.size())}}, "toy bpe");
    const TrainConfig base = rc.build();
    std::ostringstream header;
    rc.log(header);
    err << header.str();
    fs::create_directories(out);
    std::vector<AblationRow> rows;
    for (const auto& v : chosen) {
      err << "variant " << v.name << "\n";
      rows.push_back(run_ablation(*setup, base, v));
    }
    const std::string table = format_ablation_table(rows);
    os << table;
    const std::string tp = (fs::path(out) / "ablation.txt").string();
    std::ofstream(tp) << table;
    const std::string tsv = (fs::path(out) / "ablation.tsv").string();
    {
      std::ofstream f(tsv);
      f << "variant\tupdates\tparams\tfinal_loss\tbleu\tkl\tseconds\n";
      for (const auto& r : rows) {
        f << r.name << "\t" << r.updates << "\t" << r.parameters << "\t" << r.final_loss << "\t"
          << r.bleu << "\t" << r.kl << "\t" << r.seconds << "\n";
      }
    }
    m["seed"] = base.seed;
    m["config"] = rc.values;
    m["config_source"] = rc.source;
    m.output(tp);
    m.output(tsv);
    m.write((fs::path(out) / "manifest.json").string());
    return kOk;
  }
};

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kUsage:
      return kUsage;
    case ErrorKind::kNumeric:
      return kNumeric;
    case ErrorKind::kData:
    case ErrorKind::kShape:
    case ErrorKind::kContract:
      return kData;
  }
  return kData;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-branch prompting multimodal machine translation", "d2p-mmt"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);
  ToyCorpusCmd toy;
  BpeLearnCmd learn;
  BpeApplyCmd apply;
  FeaturesCmd features;
  TrainCmd train;
  TranslateCmd translate;
  ScoreCmd score;
  AverageCmd average;
  GradcheckCmd gradcheck;
  AblateCmd ablate;
  toy.add(app);
  learn.add(app);
  apply.add(app);
  features.add(app);
  train.add(app);
  translate.add(app);
  score.add(app);
  average.add(app);
  gradcheck.add(app);
  ablate.add(app);

  std::vector<const char*> argv{"d2p-mmt"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "toy-corpus") return toy.run(args, out);
    if (cmd == "bpe-learn") return learn.run(args, out);
    if (cmd == "bpe-apply") return apply.run(args, out);
    if (cmd == "features") return features.run(args, out);
    if (cmd == "train") return train.run(args, out, err);
    if (cmd == "translate") return translate.run(args, out);
    if (cmd == "score") return score.run(args, out);
    if (cmd == "avg-checkpoints") return average.run(args, out);
    if (cmd == "gradcheck") return gradcheck.run(args, out);
    if (cmd == "ablate") return ablate.run(args, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::invalid_argument& e) {
    err << "error: invalid number: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    err << "error: number out of range: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace d2p::cli
