#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace d2p::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Seed used when neither a flag nor a config file sets one: D2P_SEED if
// present, otherwise 47.
std::uint64_t default_seed();

// Runs one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace d2p::cli
