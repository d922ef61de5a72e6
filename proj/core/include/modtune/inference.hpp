#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modtune/mod_head.hpp"
#include "modtune/model.hpp"

namespace modtune {

enum class GenMode { greedy, temperature_sample };
enum class CacheMode { none, propagate };

struct GenConfig {
  GenMode mode = GenMode::greedy;
  double temperature = 1.0;
  int64_t max_new_tokens = 32;
  bool early_exit = false;        // dispatch to generate_early_exit
  CacheMode cache_mode = CacheMode::none;
  uint64_t seed = 0;
  int32_t stop_id = 257;  // EOS; -1 disables stopping

  void validate() const;
};

struct TokenCompute {
  int64_t layers_computed = 0;     // layer-forwards spent on this token
  int64_t deepest_route_layer = 0; // 1-based layer whose logits went deepest
};

// Layer-forward accounting per generated token. The layer ratio is exact and
// machine-independent; wall-clock is informational only.
struct ComputeLedger {
  int64_t n_layers = 0;
  std::vector<TokenCompute> per_token;
  int64_t total_layer_forwards = 0;
  int64_t baseline_layer_forwards = 0;  // n_layers x tokens
  double wall_clock_s = 0;

  void add(int64_t layers_computed, int64_t deepest_route_layer);
  double layer_forward_ratio() const;  // baseline / measured, 1.0 when empty
};

struct GenResult {
  std::vector<int32_t> tokens;  // prompt followed by generated tokens
  int64_t prompt_len = 0;
  ComputeLedger ledger;
};

// Autoregressive decoding from ensemble logits (or plain final logits when no
// head is attached). Each step recomputes the full stack; routing and exit
// logits are evaluated on the last-position slice only, which keeps this path
// bitwise comparable with the early-exit path.
template <typename T>
GenResult generate(const TransformerModel<T>& model, const ModHead<T>* head,
                   std::span<const int32_t> prompt, const GenConfig& cfg);

// Per step: compute through layer n-k, pick the Top-K routes from the
// last-position scores, extend only to the deepest selected route's layer,
// and mix the selected routes. Requires top_k set on the head. With
// cache_mode=none every step recomputes the prefix, and emitted tokens match
// generate() exactly because unselected routes carry exactly zero weight.
// With cache_mode=propagate, decoding is incremental over a KV cache and
// skipped layers' cache entries are filled by passing the deepest computed
// hidden through their norm + key/value projections; this is approximate.
template <typename T>
GenResult generate_early_exit(const TransformerModel<T>& model, const ModHead<T>& head,
                              std::span<const int32_t> prompt, const GenConfig& cfg);

// JSON report with per-token and aggregate counts. The wall-clock inputs are
// optional (pass <= 0 to omit the wall-clock ratio).
std::string acceleration_report(const ComputeLedger& ledger, double baseline_wall_s = 0,
                                double early_wall_s = 0);

}  // namespace modtune
