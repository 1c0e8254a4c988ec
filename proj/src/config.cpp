#include "d2p/config.hpp"

#include <cmath>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace d2p {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw ConfigError("config key '" + key + "': '" + value + "' is not " + expected);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
    bad_value(key, s, "a finite number");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    bad_value(key, s, "a non-negative integer");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  bad_value(key, s, "a boolean (true/false)");
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class Member>
Field size_field(std::string key, Member member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v) {
            std::invoke(member, c) = static_cast<std::size_t>(parse_uint(key, v));
          },
          [member](const TrainConfig& c) {
            return std::to_string(std::invoke(member, c));
          }};
}

template <class Member>
Field double_field(std::string key, Member member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v) {
            std::invoke(member, c) = parse_double(key, v);
          },
          [member](const TrainConfig& c) {
            return format_double(std::invoke(member, c));
          }};
}

template <class Member>
Field bool_field(std::string key, Member member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v) {
            std::invoke(member, c) = parse_bool(key, v);
          },
          [member](const TrainConfig& c) {
            return std::string(std::invoke(member, c) ? "true" : "false");
          }};
}

// Accessors into nested members, usable with std::invoke.
#define D2P_REF(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(size_field("vocab", D2P_REF(model.transformer.vocab)));
    f.push_back(size_field("layers_enc", D2P_REF(model.transformer.layers_enc)));
    f.push_back(size_field("layers_dec", D2P_REF(model.transformer.layers_dec)));
    f.push_back(size_field("d_model", D2P_REF(model.transformer.d)));
    f.push_back(size_field("ffn", D2P_REF(model.transformer.ffn)));
    f.push_back(size_field("heads", D2P_REF(model.transformer.heads)));
    f.push_back(double_field("dropout", D2P_REF(model.transformer.dropout)));
    f.push_back(size_field("max_len", D2P_REF(model.transformer.max_len)));
    f.push_back(bool_field("tie_output", D2P_REF(model.transformer.tie_output)));
    f.push_back(bool_field("text_only_memory", D2P_REF(model.transformer.text_only_memory)));
    f.push_back(bool_field("visual_keys", D2P_REF(model.transformer.visual_keys)));

    f.push_back(size_field("feature_len", D2P_REF(model.prompt.feature_len)));
    f.push_back(size_field("feature_dim", D2P_REF(model.prompt.feature_dim)));
    f.push_back(size_field("stages", D2P_REF(model.prompt.stages)));
    f.push_back(size_field("vpg_channels", D2P_REF(model.prompt.vpg.channels)));
    f.push_back(size_field("vpg_bottleneck", D2P_REF(model.prompt.vpg.bottleneck)));
    f.push_back(bool_field("vpg_global", D2P_REF(model.prompt.vpg.use_global)));
    f.push_back(bool_field("vpg_local", D2P_REF(model.prompt.vpg.use_local)));
    f.push_back({"coupling",
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "linear") {
                     c.model.prompt.coupling = CouplingMode::kLinear;
                   } else if (v == "conv1d") {
                     c.model.prompt.coupling = CouplingMode::kConv1d;
                   } else {
                     bad_value("coupling", v, "'linear' or 'conv1d'");
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.model.prompt.coupling == CouplingMode::kLinear ? "linear"
                                                                                       : "conv1d");
                 }});
    f.push_back(double_field("alpha", D2P_REF(model.prompt.alpha)));
    f.push_back(bool_field("use_vpg", D2P_REF(model.prompt.use_vpg)));
    f.push_back(bool_field("use_coupling", D2P_REF(model.prompt.use_coupling)));
    f.push_back(bool_field("independent", D2P_REF(model.prompt.independent)));
    f.push_back(bool_field("share_value_proj", D2P_REF(model.prompt.share_value_proj)));
    f.push_back(bool_field("split_translator", D2P_REF(model.prompt.split_translator)));

    f.push_back(double_field("mu", D2P_REF(loss.mu)));
    f.push_back(double_field("lambda", D2P_REF(loss.lambda)));
    f.push_back({"consistency",
                 [](TrainConfig& c, const std::string& v) {
                   c.loss.mode = parse_consistency_mode(v);
                 },
                 [](const TrainConfig& c) {
                   return std::string(consistency_mode_name(c.loss.mode));
                 }});
    f.push_back(bool_field("stop_gradient", D2P_REF(loss.stop_gradient)));
    f.push_back(double_field("label_smoothing", D2P_REF(label_smoothing)));

    f.push_back(double_field("lr", D2P_REF(adam.lr)));
    f.push_back(double_field("beta1", D2P_REF(adam.beta1)));
    f.push_back(double_field("beta2", D2P_REF(adam.beta2)));
    f.push_back(double_field("adam_eps", D2P_REF(adam.eps)));
    f.push_back(size_field("warmup", D2P_REF(adam.warmup)));
    f.push_back(bool_field("inverse_sqrt", D2P_REF(adam.inverse_sqrt)));

    f.push_back(size_field("batch_tokens", D2P_REF(batch_tokens)));
    f.push_back(size_field("accumulation", D2P_REF(accumulation)));
    f.push_back(size_field("epochs", D2P_REF(epochs)));
    f.push_back(size_field("max_updates", D2P_REF(max_updates)));
    f.push_back(size_field("valid_every", D2P_REF(valid_every)));
    f.push_back(size_field("beam", D2P_REF(beam)));
    f.push_back(size_field("decode_extra", D2P_REF(decode_extra)));
    f.push_back({"seed",
                 [](TrainConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"dtype",
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "f32") {
                     c.dtype = DType::kF32;
                   } else if (v == "f64") {
                     c.dtype = DType::kF64;
                   } else {
                     bad_value("dtype", v, "'f32' or 'f64'");
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.dtype == DType::kF32 ? "f32" : "f64");
                 }});
    return f;
  }();
  return table;
}

#undef D2P_REF

}  // namespace

TrainConfig::TrainConfig() = default;

void TrainConfig::validate() const {
  model.prompt.validate();
  loss.validate();
  if (label_smoothing < 0.0 || label_smoothing > 1.0) {
    throw ConfigError("label_smoothing must be in [0, 1]");
  }
  if (batch_tokens == 0) throw ConfigError("batch_tokens must be positive");
  if (accumulation == 0) throw ConfigError("accumulation must be positive");
  if (beam == 0) throw ConfigError("beam must be positive");
  TransformerConfig t = model.transformer;
  t.visual_dim = t.d;
  if (t.vocab == 0) t.vocab = 5;  // filled from the vocabulary at run time
  t.validate();
}

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(number) + ": empty key");
    if (!out.emplace(key, value).second) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

ConfigMap read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open config file '" + path + "'");
  std::ostringstream s;
  s << f.rdbuf();
  return parse_config_text(s.str(), path);
}

void apply_config(TrainConfig& config, const ConfigMap& values) {
  for (const auto& [key, value] : values) {
    bool found = false;
    for (const auto& f : fields()) {
      if (f.key == key) {
        f.set(config, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
}

ConfigMap config_values(const TrainConfig& config) {
  ConfigMap out;
  for (const auto& f : fields()) out[f.key] = f.get(config);
  return out;
}

std::string config_text(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

TrainConfig config_from_text(const std::string& text, const std::string& origin) {
  TrainConfig c;
  apply_config(c, parse_config_text(text, origin));
  return c;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace d2p
