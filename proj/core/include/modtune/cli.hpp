#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace modtune {

// One parsed command-line invocation. Flag overrides (preset, k, top_k,
// lambda) are applied on top of the config file.
struct RunSpec {
  std::string command;  // pretrain | tune | eval | generate | sweep | gradcheck | analyze
  std::string config_path;      // empty = built-in defaults
  std::string out_dir = "out";  // created if absent; non-empty needs force
  std::vector<uint64_t> seeds;  // empty = {0}; tune runs every seed
  std::optional<std::string> preset;
  std::optional<int64_t> k;
  std::optional<int64_t> top_k;  // 0 forces dense routing
  std::optional<double> lambda;
  bool force = false;
};

// Dispatches one command. Exit codes: 0 success; 1 validation, config,
// shape, index, state or I/O error; 2 numerical failure (non-finite loss or
// a failed gradient check). MODTUNE_THREADS caps sweep parallelism.
int run(const RunSpec& spec);

}  // namespace modtune
