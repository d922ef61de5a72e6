#include "modtune/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>

#include "modtune/ops.hpp"

namespace modtune {

Preset preset_from_string(std::string_view s) {
  if (s == "lora_all") return Preset::lora_all;
  if (s == "lora_not_k") return Preset::lora_not_k;
  if (s == "lora_all_plus_mod") return Preset::lora_all_plus_mod;
  if (s == "lora_not_k_plus_mod") return Preset::lora_not_k_plus_mod;
  if (s == "mod_only") return Preset::mod_only;
  if (s == "full_baseline") return Preset::full_baseline;
  throw ConfigError("unknown preset: " + std::string(s));
}

const char* preset_name(Preset p) {
  switch (p) {
    case Preset::lora_all: return "lora_all";
    case Preset::lora_not_k: return "lora_not_k";
    case Preset::lora_all_plus_mod: return "lora_all_plus_mod";
    case Preset::lora_not_k_plus_mod: return "lora_not_k_plus_mod";
    case Preset::mod_only: return "mod_only";
    case Preset::full_baseline: return "full_baseline";
  }
  return "?";
}

bool preset_uses_lora(Preset p) {
  return p == Preset::lora_all || p == Preset::lora_not_k || p == Preset::lora_all_plus_mod ||
         p == Preset::lora_not_k_plus_mod;
}

bool preset_uses_mod(Preset p) {
  return p == Preset::lora_all_plus_mod || p == Preset::lora_not_k_plus_mod ||
         p == Preset::mod_only;
}

void TrainConfig::validate() const {
  if (lr <= 0) throw ValidationError("train: lr must be > 0");
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (epochs < 1 && max_steps < 1) throw ValidationError("train: need epochs >= 1 or max_steps >= 1");
  if (eval_every < 1) throw ValidationError("train: eval_every must be >= 1");
  if (max_steps < 0) throw ValidationError("train: max_steps must be >= 0");
  if (seq_len < 0) throw ValidationError("train: seq_len must be >= 0");
}

template <typename T>
std::vector<Tensor<T>> configure_trainables(TransformerModel<T>& model, ModHead<T>* head,
                                            Preset preset) {
  if (preset_uses_lora(preset) && !model.has_lora)
    throw ConfigError(std::string("preset ") + preset_name(preset) +
                      " requires adapters, but none are attached");
  if (preset_uses_mod(preset) && head == nullptr)
    throw ConfigError(std::string("preset ") + preset_name(preset) +
                      " requires a routing head, but none is attached");
  if (!preset_uses_mod(preset) && preset != Preset::full_baseline && head != nullptr)
    throw ConfigError(std::string("preset ") + preset_name(preset) +
                      " does not take a routing head");

  auto wants = [&](ParamGroup g) {
    switch (preset) {
      case Preset::lora_all:
      case Preset::lora_not_k:
        return g == ParamGroup::lora;
      case Preset::lora_all_plus_mod:
      case Preset::lora_not_k_plus_mod:
        return g == ParamGroup::lora || g == ParamGroup::mod_routing ||
               g == ParamGroup::mod_norms;
      case Preset::mod_only:
        return g == ParamGroup::mod_routing || g == ParamGroup::mod_norms;
      case Preset::full_baseline:
        return true;  // every parameter of every attached component
    }
    return false;
  };

  std::vector<NamedParam<T>> all = model.named_params();
  if (head != nullptr) {
    auto hp = head->named_params();
    all.insert(all.end(), hp.begin(), hp.end());
  }

  std::vector<Tensor<T>> trainables;
  for (auto& np : all) {
    const bool on = wants(np.group);
    np.tensor.set_requires_grad(on);
    if (on) trainables.push_back(np.tensor);
  }
  if (trainables.empty()) throw ConfigError("preset selects no trainable parameters");
  return trainables;
}

namespace {

// Flattens a route-weight tensor [..., k] into a growing row buffer so the
// windowed stats use the same code path as the free functions.
struct WeightWindow {
  int64_t k = 0;
  std::vector<double> rows;

  template <typename T>
  void add(const Tensor<T>& weights) {
    const auto vals = weights.values();
    rows.reserve(rows.size() + vals.size());
    for (const T v : vals) rows.push_back(static_cast<double>(v));
  }

  bool empty() const { return rows.empty(); }

  Tensor<double> take() {
    const int64_t n = static_cast<int64_t>(rows.size()) / k;
    Tensor<double> t = Tensor<double>::from_data({n, k}, rows);
    rows.clear();
    return t;
  }
};

void fill_route_fields(MetricsRecord& rec, WeightWindow& window, double epsilon) {
  if (window.empty()) return;
  const Tensor<double> w = window.take();
  rec.route_sparsity = sparsity(w, epsilon);
  const auto stats = route_stats(w);
  rec.route_mean.resize(stats.size());
  rec.route_var.resize(stats.size());
  for (size_t i = 0; i < stats.size(); ++i) {
    rec.route_mean[i] = stats[i].mean;
    rec.route_var[i] = stats[i].var;
  }
}

}  // namespace

template <typename T>
MetricsRecord evaluate(const TransformerModel<T>& model, const ModHead<T>* head,
                       const std::vector<Example>& split, int64_t batch_size, int64_t seq_len,
                       int64_t step) {
  if (split.empty()) throw ValidationError("evaluate: empty split");
  MetricsRecord rec;
  rec.step = step;
  rec.split = "val";

  std::vector<const Example*> ptrs;
  ptrs.reserve(split.size());
  for (const auto& e : split) ptrs.push_back(&e);

  const int64_t k = head ? head->cfg.k : 0;
  double task_acc = 0, distill_acc = 0, total_acc = 0;
  std::vector<double> route_acc(static_cast<size_t>(k), 0.0);
  int64_t tokens = 0;
  WeightWindow window;
  window.k = std::max<int64_t>(k, 1);

  for (size_t off = 0; off < ptrs.size(); off += static_cast<size_t>(batch_size)) {
    const size_t n = std::min(static_cast<size_t>(batch_size), ptrs.size() - off);
    Batch batch = make_batch(std::span<const Example* const>(ptrs.data() + off, n), seq_len);
    const double w = static_cast<double>(batch.scored_tokens);
    if (head != nullptr) {
      ForwardTrace<T> trace = forward(model, batch.inputs);
      const bool want_probs = head->cfg.lambda > 0 && head->cfg.k > 1;
      EnsembleOutput<T> ens = ensemble(model, *head, trace, want_probs);
      LossBundle<T> bundle =
          mod_losses(*head, ens, batch.targets, &batch.mask, /*route_diagnostics=*/true);
      task_acc += w * static_cast<double>(bundle.task.item());
      distill_acc += w * static_cast<double>(bundle.distill.item());
      total_acc += w * static_cast<double>(bundle.total.item());
      for (int64_t i = 0; i < k; ++i)
        route_acc[i] += w * static_cast<double>(bundle.per_route_task[i]);
      window.add(ens.weights);
    } else {
      ForwardTrace<T> trace = forward(model, batch.inputs);
      Tensor<T> logits = final_logits(model, trace);
      const double task = static_cast<double>(
          ops::cross_entropy(logits, batch.targets, &batch.mask).item());
      task_acc += w * task;
      total_acc += w * task;
    }
    tokens += batch.scored_tokens;
  }

  const double denom = static_cast<double>(tokens);
  rec.loss_task = task_acc / denom;
  rec.loss_distill = distill_acc / denom;
  rec.loss_total = total_acc / denom;
  rec.tokens_seen = tokens;
  if (k > 0) {
    rec.route_task.resize(route_acc.size());
    for (size_t i = 0; i < route_acc.size(); ++i) rec.route_task[i] = route_acc[i] / denom;
    fill_route_fields(rec, window, head->cfg.epsilon_sparsity);
  }
  return rec;
}

template <typename T>
TrainResult train(TransformerModel<T>& model, ModHead<T>* head, const Dataset& data,
                  const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<Tensor<T>> trainables = configure_trainables(model, head, cfg.preset);
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.grad_clip = cfg.grad_clip;
  AdamW<T> opt(trainables, ocfg);

  const int64_t seq_len = cfg.seq_len > 0 ? cfg.seq_len : data.max_len - 1;
  if (seq_len < 1) throw ValidationError("train: dataset yields empty sequences");
  Batcher batcher(data.train, cfg.batch_size, seq_len, cfg.seed);
  const int64_t total_steps =
      cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * batcher.batches_per_epoch();

  TrainResult result;
  const int64_t k = head ? head->cfg.k : 0;
  WeightWindow window;
  window.k = std::max<int64_t>(k, 1);

  if (!data.val.empty())
    result.metrics.push_back(evaluate(model, head, data.val, cfg.batch_size, seq_len, 0));

  int64_t tokens_seen = 0;
  for (int64_t step = 1; step <= total_steps; ++step) {
    Batch batch = batcher.next();
    opt.zero_grad();
    const bool log_step = (step % cfg.eval_every == 0) || step == total_steps;

    double loss_task = 0, loss_distill = 0, loss_total = 0;
    std::vector<double> route_task;
    {
      Tape<T> tape;
      Tensor<T> loss;
      if (head != nullptr) {
        ForwardTrace<T> trace = forward(model, batch.inputs);
        const bool want_probs = head->cfg.lambda > 0 && head->cfg.k > 1;
        EnsembleOutput<T> ens = ensemble(model, *head, trace, want_probs);
        LossBundle<T> bundle = mod_losses(*head, ens, batch.targets, &batch.mask, log_step);
        loss = bundle.total;
        loss_task = static_cast<double>(bundle.task.item());
        loss_distill = static_cast<double>(bundle.distill.item());
        loss_total = static_cast<double>(bundle.total.item());
        route_task.assign(bundle.per_route_task.begin(), bundle.per_route_task.end());
        window.add(ens.weights);
      } else {
        ForwardTrace<T> trace = forward(model, batch.inputs);
        Tensor<T> logits = final_logits(model, trace);
        loss = ops::cross_entropy(logits, batch.targets, &batch.mask);
        loss_task = loss_total = static_cast<double>(loss.item());
      }

      tokens_seen += batch.scored_tokens;
      if (!std::isfinite(loss_total)) {
        MetricsRecord rec;
        rec.step = step;
        rec.split = "abort";
        rec.loss_task = loss_task;
        rec.loss_distill = loss_distill;
        rec.loss_total = loss_total;
        rec.tokens_seen = tokens_seen;
        result.metrics.push_back(rec);
        result.steps = step;
        result.aborted = true;
        result.abort_reason = "non-finite loss at step " + std::to_string(step);
        result.final_train_loss = loss_total;
        result.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return result;
      }
      tape.backward(loss);
    }
    opt.step();
    result.final_train_loss = loss_total;

    if (log_step) {
      MetricsRecord rec;
      rec.step = step;
      rec.split = "train";
      rec.loss_task = loss_task;
      rec.loss_distill = loss_distill;
      rec.loss_total = loss_total;
      rec.tokens_seen = tokens_seen;
      rec.route_task = route_task;
      fill_route_fields(rec, window, head ? head->cfg.epsilon_sparsity : 0.0);
      result.metrics.push_back(rec);
      if (!data.val.empty())
        result.metrics.push_back(evaluate(model, head, data.val, cfg.batch_size, seq_len, step));
    }
  }

  result.steps = total_steps;
  result.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

template <typename T>
std::vector<double> sparsity(const Tensor<T>& weights, double epsilon) {
  const auto& shape = weights.dims();
  if (shape.empty()) throw ShapeError("sparsity: weights must have a route axis");
  const int64_t k = shape.back();
  const int64_t rows = weights.numel() / k;
  if (rows == 0) throw ValidationError("sparsity: no rows");
  const auto vals = weights.values();
  std::vector<double> out(static_cast<size_t>(k), 0.0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < k; ++i)
      if (static_cast<double>(vals[r * k + i]) < epsilon) out[i] += 1.0;
  for (auto& v : out) v /= static_cast<double>(rows);
  return out;
}

template <typename T>
std::vector<RouteStat> route_stats(const Tensor<T>& weights) {
  const auto& shape = weights.dims();
  if (shape.empty()) throw ShapeError("route_stats: weights must have a route axis");
  const int64_t k = shape.back();
  const int64_t rows = weights.numel() / k;
  if (rows == 0) throw ValidationError("route_stats: no rows");
  const auto vals = weights.values();
  std::vector<RouteStat> out(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) {
    double mean = 0;
    for (int64_t r = 0; r < rows; ++r) mean += static_cast<double>(vals[r * k + i]);
    mean /= static_cast<double>(rows);
    double var = 0;
    for (int64_t r = 0; r < rows; ++r) {
      const double d = static_cast<double>(vals[r * k + i]) - mean;
      var += d * d;
    }
    out[i].mean = mean;
    out[i].var = var / static_cast<double>(rows);
  }
  return out;
}

std::vector<double> smooth(const std::vector<double>& series, int window) {
  if (window < 1) throw ValidationError("smooth: window must be >= 1");
  const int64_t n = static_cast<int64_t>(series.size());
  const int64_t lo = (window - 1) / 2, hi = window / 2;
  std::vector<double> out(series.size());
  for (int64_t i = 0; i < n; ++i) {
    const int64_t a = std::max<int64_t>(0, i - lo);
    const int64_t b = std::min<int64_t>(n - 1, i + hi);
    double s = 0;
    for (int64_t j = a; j <= b; ++j) s += series[j];
    out[i] = s / static_cast<double>(b - a + 1);
  }
  return out;
}

namespace {

constexpr std::string_view kMetricsSchema = "modtune.metrics.v1";

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double cell_or_nan(const std::vector<double>& v, size_t i) {
  return i < v.size() ? v[i] : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records,
                       int64_t k) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for write: " + path);
  out << "# " << kMetricsSchema << " k=" << k << "\n";
  out << "step,split,loss_task,loss_distill,loss_total,tokens_seen";
  for (int64_t i = 0; i < k; ++i) out << ",route_task_" << i;
  for (int64_t i = 0; i < k; ++i) out << ",sparsity_" << i;
  for (int64_t i = 0; i < k; ++i) out << ",mean_" << i;
  for (int64_t i = 0; i < k; ++i) out << ",var_" << i;
  out << "\n";
  for (const auto& r : records) {
    out << r.step << ',' << r.split << ',' << fmt(r.loss_task) << ',' << fmt(r.loss_distill)
        << ',' << fmt(r.loss_total) << ',' << r.tokens_seen;
    for (int64_t i = 0; i < k; ++i) out << ',' << fmt(cell_or_nan(r.route_task, i));
    for (int64_t i = 0; i < k; ++i) out << ',' << fmt(cell_or_nan(r.route_sparsity, i));
    for (int64_t i = 0; i < k; ++i) out << ',' << fmt(cell_or_nan(r.route_mean, i));
    for (int64_t i = 0; i < k; ++i) out << ',' << fmt(cell_or_nan(r.route_var, i));
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path, int64_t* k_out) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty metrics file: " + path);
  std::istringstream head(line);
  std::string hash, schema, kfield;
  head >> hash >> schema >> kfield;
  if (hash != "#" || schema != kMetricsSchema || kfield.rfind("k=", 0) != 0)
    throw ConfigError("unrecognized metrics schema in " + path + ": " + line);
  const int64_t k = std::stoll(kfield.substr(2));
  if (k_out) *k_out = k;
  if (!std::getline(in, line) || line.rfind("step,split", 0) != 0)
    throw ConfigError("missing metrics header in " + path);

  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    const size_t want = 6 + static_cast<size_t>(4 * k);
    if (cells.size() != want)
      throw ConfigError("bad metrics row in " + path + " (expected " + std::to_string(want) +
                        " cells): " + line);
    MetricsRecord r;
    r.step = std::stoll(cells[0]);
    r.split = cells[1];
    r.loss_task = std::stod(cells[2]);
    r.loss_distill = std::stod(cells[3]);
    r.loss_total = std::stod(cells[4]);
    r.tokens_seen = std::stoll(cells[5]);
    size_t c = 6;
    auto grab = [&](std::vector<double>& dst) {
      dst.resize(static_cast<size_t>(k));
      for (int64_t i = 0; i < k; ++i) dst[static_cast<size_t>(i)] = std::stod(cells[c++]);
    };
    if (k > 0) {
      grab(r.route_task);
      grab(r.route_sparsity);
      grab(r.route_mean);
      grab(r.route_var);
    }
    records.push_back(std::move(r));
  }
  return records;
}

#define MODTUNE_INSTANTIATE_TRAINER(T)                                                          \
  template std::vector<Tensor<T>> configure_trainables<T>(TransformerModel<T>&, ModHead<T>*,    \
                                                          Preset);                              \
  template TrainResult train<T>(TransformerModel<T>&, ModHead<T>*, const Dataset&,              \
                                const TrainConfig&);                                            \
  template MetricsRecord evaluate<T>(const TransformerModel<T>&, const ModHead<T>*,             \
                                     const std::vector<Example>&, int64_t, int64_t, int64_t);   \
  template std::vector<double> sparsity<T>(const Tensor<T>&, double);                           \
  template std::vector<RouteStat> route_stats<T>(const Tensor<T>&);

MODTUNE_INSTANTIATE_TRAINER(float)
MODTUNE_INSTANTIATE_TRAINER(double)

#undef MODTUNE_INSTANTIATE_TRAINER

}  // namespace modtune
