#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "modtune/dataset.hpp"
#include "modtune/inference.hpp"
#include "modtune/lora.hpp"
#include "modtune/mod_head.hpp"
#include "modtune/model.hpp"
#include "modtune/trainer.hpp"

namespace modtune {

// Flat "key = value" file: '#' starts a comment, keys are namespaced
// (model.d_model, mod.k, train.lr). Parse errors and duplicate keys report
// line numbers; keys nobody consumed are hard errors.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_string(const std::string& text,
                                     const std::string& origin = "<inline>");

  bool has(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback);
  int64_t get_int(const std::string& key, int64_t fallback);
  uint64_t get_uint(const std::string& key, uint64_t fallback);
  double get_real(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);

  void reject_unused() const;  // ConfigError listing unconsumed keys

 private:
  struct Entry {
    std::string value;
    int line = 0;
    bool used = false;
  };
  std::string origin_;
  std::map<std::string, Entry> entries_;

  Entry* find(const std::string& key);
  [[noreturn]] void bad_value(const std::string& key, const Entry& e, const char* want) const;
};

// Every setting a run can carry; seeds are injected per run by the CLI.
struct RunConfig {
  ModelConfig model;
  bool mod_enabled = false;
  ModConfig mod;
  bool lora_enabled = false;
  LoraConfig lora;  // layer_mask resolved from the preset at attach time
  int64_t lora_exclude_last = 0;
  TrainConfig train;
  std::string base_checkpoint;
  DatasetSpec data;
  GenConfig gen;
  std::string gen_prompt;
  bool gen_stop_at_eos = true;
  int64_t sweep_k_max = 6;
  int64_t sweep_max_steps = 200;
  std::string analyze_metrics;  // metrics CSV a tune run wrote
  int64_t analyze_window = 3;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_kv(KeyValueConfig& kv);

  // Full effective configuration in registry order, for run summaries.
  std::vector<std::pair<std::string, std::string>> resolved() const;
};

const char* gen_mode_name(GenMode m);
GenMode gen_mode_from_string(const std::string& s);
const char* cache_mode_name(CacheMode m);
CacheMode cache_mode_from_string(const std::string& s);
std::string lora_targets_to_string(const std::vector<LoraTarget>& targets);
std::vector<LoraTarget> lora_targets_from_string(const std::string& s);

}  // namespace modtune
