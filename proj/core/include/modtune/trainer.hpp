#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "modtune/dataset.hpp"
#include "modtune/mod_head.hpp"
#include "modtune/model.hpp"
#include "modtune/objectives.hpp"
#include "modtune/optimizer.hpp"

namespace modtune {

// Which parameter groups a tune run updates. The *_plus_mod presets train
// adapters and the MoD head together; full_baseline trains every parameter
// of whatever components are attached (base alone = vanilla fine-tune).
enum class Preset {
  lora_all,
  lora_not_k,
  lora_all_plus_mod,
  lora_not_k_plus_mod,
  mod_only,
  full_baseline,
};

Preset preset_from_string(std::string_view s);
const char* preset_name(Preset p);
bool preset_uses_lora(Preset p);
bool preset_uses_mod(Preset p);

struct TrainConfig {
  Preset preset = Preset::full_baseline;
  double lr = 3e-4;
  int64_t batch_size = 16;
  int64_t epochs = 2;
  double grad_clip = 1.0;  // <= 0 disables
  double weight_decay = 0.0;
  uint64_t seed = 0;
  int64_t eval_every = 50;
  int64_t max_steps = 0;  // 0 = run the full epoch budget
  int64_t seq_len = 0;    // 0 = longest example

  void validate() const;
};

struct MetricsRecord {
  int64_t step = 0;
  std::string split;  // "train", "val" or "abort"
  double loss_task = 0;
  double loss_distill = 0;
  double loss_total = 0;
  int64_t tokens_seen = 0;
  std::vector<double> route_task;      // per-route CE
  std::vector<double> route_sparsity;  // fraction of weights < epsilon
  std::vector<double> route_mean;
  std::vector<double> route_var;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  int64_t steps = 0;
  bool aborted = false;
  std::string abort_reason;
  double final_train_loss = 0;
  double wall_clock_s = 0;
};

// Marks exactly the preset's parameter groups trainable (everything else
// frozen) and returns the trainables in registry order: base params with
// final_norm last, then adapters, then mod head. ConfigError when the
// preset and the attached components disagree.
template <typename T>
std::vector<Tensor<T>> configure_trainables(TransformerModel<T>& model, ModHead<T>* head,
                                            Preset preset);

template <typename T>
TrainResult train(TransformerModel<T>& model, ModHead<T>* head, const Dataset& data,
                  const TrainConfig& cfg);

// Token-weighted metrics over a split; never touches parameters or tape.
template <typename T>
MetricsRecord evaluate(const TransformerModel<T>& model, const ModHead<T>* head,
                       const std::vector<Example>& split, int64_t batch_size, int64_t seq_len,
                       int64_t step);

// Per-route fraction of token weights strictly below epsilon.
template <typename T>
std::vector<double> sparsity(const Tensor<T>& weights, double epsilon);

struct RouteStat {
  double mean = 0;
  double var = 0;  // population variance
};

template <typename T>
std::vector<RouteStat> route_stats(const Tensor<T>& weights);

// Centered moving average, truncated at the boundaries.
std::vector<double> smooth(const std::vector<double>& series, int window = 3);

// CSV with a leading versioned schema line; readers reject unknown versions.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records,
                       int64_t k);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path, int64_t* k_out);

}  // namespace modtune
