#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "d2p/dual_branch.hpp"
#include "d2p/losses.hpp"
#include "d2p/optim.hpp"

namespace d2p {

// Everything a training run depends on. Each field is a config key.
struct TrainConfig {
  DualBranchConfig model;
  LossWeights loss;
  AdamConfig adam;
  double label_smoothing = 0.1;
  std::size_t batch_tokens = 2048;
  std::size_t accumulation = 4;
  std::size_t epochs = 1;
  std::size_t max_updates = 0;   // 0: no limit
  std::size_t valid_every = 1;   // epochs between validation decodes; 0: never
  std::size_t beam = 5;
  std::size_t decode_extra = 10; // output length cap is source length + this
  std::uint64_t seed = 47;
  DType dtype = DType::kF32;

  TrainConfig();
  void validate() const;
};

using ConfigMap = std::map<std::string, std::string>;

// Flat "key = value" lines; '#' starts a comment, blank lines are skipped.
// `origin` names the source in error messages.
ConfigMap parse_config_text(const std::string& text, const std::string& origin);
// Missing or unreadable files raise DataError naming the path.
ConfigMap read_config_file(const std::string& path);

// Unknown keys and malformed values raise ConfigError.
void apply_config(TrainConfig& config, const ConfigMap& values);
ConfigMap config_values(const TrainConfig& config);
std::string config_text(const TrainConfig& config);
TrainConfig config_from_text(const std::string& text, const std::string& origin);

std::vector<std::string> config_keys();

}  // namespace d2p
