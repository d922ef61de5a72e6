#include "modtune/cli.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "json.hpp"
#include "modtune/checkpoint.hpp"
#include "modtune/config.hpp"
#include "modtune/inference.hpp"
#include "modtune/objectives.hpp"
#include "modtune/ops.hpp"
#include "modtune/trainer.hpp"

namespace modtune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

RunConfig load_run_config(const RunSpec& spec) {
  RunConfig rc;
  if (!spec.config_path.empty()) rc = RunConfig::from_file(spec.config_path);
  if (spec.preset) rc.train.preset = preset_from_string(*spec.preset);
  if (spec.k) rc.mod.k = *spec.k;
  if (spec.top_k) rc.mod.top_k = *spec.top_k > 0 ? std::optional<int64_t>(*spec.top_k) : std::nullopt;
  if (spec.lambda) rc.mod.lambda = *spec.lambda;
  return rc;
}

fs::path prepare_out_dir(const RunSpec& spec) {
  const fs::path out(spec.out_dir);
  if (fs::exists(out)) {
    if (!fs::is_directory(out))
      throw ValidationError("output path exists and is not a directory: " + out.string());
    const bool empty = fs::directory_iterator(out) == fs::directory_iterator();
    if (!empty && !spec.force)
      throw ValidationError("output directory not empty (use --force): " + out.string());
  } else {
    fs::create_directories(out);
  }
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

json resolved_json(const RunConfig& rc) {
  json j = json::object();
  for (const auto& [key, value] : rc.resolved()) j[key] = value;
  return j;
}

int64_t sweep_workers(size_t cells) {
  int64_t cap = static_cast<int64_t>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("MODTUNE_THREADS")) {
    try {
      size_t pos = 0;
      cap = std::stoll(env, &pos);
      if (pos != std::string(env).size() || cap < 1)
        throw ConfigError("MODTUNE_THREADS must be a positive integer");
    } catch (const std::logic_error&) {
      throw ConfigError("MODTUNE_THREADS must be a positive integer");
    }
  }
  return std::min<int64_t>(cap, static_cast<int64_t>(cells));
}

// Which k the LoRA_not-k mask excludes: the routed range when a head rides
// along, the explicit override otherwise, falling back to the configured k.
int64_t exclude_k(const RunConfig& rc, bool mod_attached) {
  if (mod_attached) return rc.mod.k;
  if (rc.lora_exclude_last > 0) return rc.lora_exclude_last;
  return rc.mod.k;
}

// Attaches adapters/head per preset (full_baseline attaches whatever the
// config enables). Sweep cells override k / top_k.
void attach_for_preset(ModelSystem<float>& sys, const RunConfig& rc, Preset p, uint64_t seed,
                       std::optional<int64_t> cell_k = std::nullopt,
                       std::optional<int64_t> cell_top_k = std::nullopt) {
  const bool want_lora = preset_uses_lora(p) || (p == Preset::full_baseline && rc.lora_enabled);
  const bool want_mod = preset_uses_mod(p) || (p == Preset::full_baseline && rc.mod_enabled);

  ModConfig mc = rc.mod;
  if (cell_k) mc.k = *cell_k;
  if (cell_top_k) mc.top_k = *cell_top_k < mc.k ? std::optional<int64_t>(*cell_top_k) : std::nullopt;

  if (want_lora && !sys.model.has_lora) {
    LoraConfig lc = rc.lora;
    if (p == Preset::lora_not_k || p == Preset::lora_not_k_plus_mod)
      lc.layer_mask = layer_mask_excluding_last(sys.model.cfg.n_layers, exclude_k(rc, want_mod));
    else
      lc.layer_mask.clear();
    lc.validate(sys.model.cfg);
    inject(sys.model, lc, seed);
    sys.meta.lora = lc;
  }
  if (want_mod && !sys.head) {
    mc.validate(sys.model.cfg);
    sys.head = init_head(sys.model, mc, seed);
    sys.meta.mod = mc;
  }
}

ModelSystem<float> load_system(const RunConfig& rc, const char* cmd) {
  if (rc.base_checkpoint.empty())
    throw ConfigError(std::string(cmd) + " requires train.base_checkpoint");
  return load_checkpoint<float>(rc.base_checkpoint);
}

int64_t adapter_params_per_layer(const ModelConfig& m, const LoraConfig& lc) {
  int64_t total = 0;
  for (const LoraTarget t : lc.target_projections) {
    int64_t d_in = m.d_model, d_out = m.d_model;
    if (t == LoraTarget::mlp_in) d_out = m.d_ff;
    if (t == LoraTarget::mlp_out) d_in = m.d_ff;
    total += lc.rank * (d_in + d_out);
  }
  return total;
}

template <typename T>
json param_summary(const RunConfig& rc, ModelSystem<T>& sys) {
  auto all = sys.all_params();
  json by_group = json::object();
  int64_t added_trainable = 0;
  for (const ParamGroup g : {ParamGroup::base, ParamGroup::lora, ParamGroup::mod_routing,
                             ParamGroup::mod_norms}) {
    const int64_t total = count_params(all, false, g);
    const int64_t trainable = count_params(all, true, g);
    by_group[param_group_name(g)] = {{"total", total}, {"trainable", trainable}};
    if (g != ParamGroup::base) added_trainable += trainable;
  }
  json j;
  j["total"] = count_params(all, false);
  j["trainable"] = count_params(all, true);
  j["by_group"] = by_group;
  j["added_trainable"] = added_trainable;

  // "+params %" convention: added trainables relative to the adapter count a
  // lora_not_k run of the same shape would train.
  const int64_t not_k_layers = sys.model.cfg.n_layers - exclude_k(rc, sys.head.has_value());
  const int64_t ref = not_k_layers * adapter_params_per_layer(sys.model.cfg, rc.lora);
  j["lora_not_k_reference"] = ref;
  if (ref > 0)
    j["added_params_pct"] = 100.0 * static_cast<double>(added_trainable) / static_cast<double>(ref);
  else
    j["added_params_pct"] = nullptr;
  return j;
}

int64_t resolve_seq_len(const RunConfig& rc, const Dataset& data) {
  return rc.train.seq_len > 0 ? rc.train.seq_len : data.max_len - 1;
}

std::vector<int32_t> prompt_tokens(const std::string& text) {
  std::vector<int32_t> ids{kBosId};
  const auto bytes = encode_bytes(text);
  ids.insert(ids.end(), bytes.begin(), bytes.end());
  return ids;
}

// Greedy exact match of the answer span over the first `limit` examples.
template <typename T>
double exact_match_accuracy(const TransformerModel<T>& model, const ModHead<T>* head,
                            const std::vector<Example>& split, size_t limit, bool early_exit,
                            CacheMode cache_mode, uint64_t seed) {
  const size_t n = std::min(split.size(), limit);
  if (n == 0) return 0.0;
  size_t correct = 0;
  for (size_t i = 0; i < n; ++i) {
    const Example& ex = split[i];
    const std::vector<int32_t> expected(ex.tokens.begin() + ex.answer_begin, ex.tokens.end());
    if (expected.empty()) continue;
    GenConfig g;
    g.mode = GenMode::greedy;
    g.max_new_tokens = static_cast<int64_t>(expected.size());
    g.stop_id = kEosId;
    g.cache_mode = cache_mode;
    g.seed = seed;
    const std::span<const int32_t> prompt(ex.tokens.data(),
                                          static_cast<size_t>(ex.answer_begin));
    const GenResult res = early_exit && head != nullptr
                              ? generate_early_exit(model, *head, prompt, g)
                              : generate(model, head, prompt, g);
    const std::vector<int32_t> got(res.tokens.begin() + res.prompt_len, res.tokens.end());
    if (got == expected) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

json train_result_json(const TrainResult& res) {
  json j;
  j["steps"] = res.steps;
  j["final_train_loss"] = res.final_train_loss;
  j["wall_clock_s"] = res.wall_clock_s;
  j["aborted"] = res.aborted;
  if (res.aborted) j["abort_reason"] = res.abort_reason;
  double final_val = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : res.metrics)
    if (r.split == "val") final_val = r.loss_task;
  j["final_val_task_ce"] = final_val;
  return j;
}

// --- commands ---

int cmd_pretrain(const RunSpec& spec, RunConfig rc) {
  const fs::path out = prepare_out_dir(spec);
  const uint64_t seed = spec.seeds.front();
  rc.model.seed = seed;
  rc.model.validate();

  const Dataset data = build_dataset(rc.data);
  TransformerModel<float> model = init_model<float>(rc.model);
  TrainConfig tc = rc.train;
  tc.preset = Preset::full_baseline;  // pretraining is a plain base-model fit
  tc.seed = seed;
  const TrainResult res = train<float>(model, nullptr, data, tc);

  write_metrics_csv((out / "metrics.csv").string(), res.metrics, 0);
  json summary;
  summary["command"] = "pretrain";
  summary["seed"] = seed;
  summary["result"] = train_result_json(res);
  summary["resolved_config"] = resolved_json(rc);
  if (!res.aborted) {
    CheckpointMeta meta;
    meta.model = rc.model;
    const auto params = model.named_params();
    save_checkpoint((out / "checkpoint.bin").string(), params, meta);
    summary["checkpoint"] = (out / "checkpoint.bin").string();
  }
  write_json(out / "run_summary.json", summary);
  std::cout << "pretrain: steps=" << res.steps << " final_train_loss=" << res.final_train_loss
            << (res.aborted ? " ABORTED" : "") << " -> " << out.string() << "\n";
  return res.aborted ? 2 : 0;
}

int cmd_tune(const RunSpec& spec, RunConfig rc) {
  const fs::path out = prepare_out_dir(spec);
  const Dataset data = build_dataset(rc.data);

  std::vector<double> final_train, final_val;
  for (const uint64_t seed : spec.seeds) {
    ModelSystem<float> sys = load_system(rc, "tune");
    attach_for_preset(sys, rc, rc.train.preset, seed);
    TrainConfig tc = rc.train;
    tc.seed = seed;
    const TrainResult res = train(sys.model, sys.head_ptr(), data, tc);

    const fs::path sdir = out / ("seed_" + std::to_string(seed));
    fs::create_directories(sdir);
    const int64_t k = sys.head ? sys.head->cfg.k : 0;
    write_metrics_csv((sdir / "metrics.csv").string(), res.metrics, k);

    json summary;
    summary["command"] = "tune";
    summary["preset"] = preset_name(tc.preset);
    summary["seed"] = seed;
    summary["result"] = train_result_json(res);
    summary["params"] = param_summary(rc, sys);
    summary["resolved_config"] = resolved_json(rc);
    if (!res.aborted) {
      auto params = sys.all_params();
      save_checkpoint((sdir / "checkpoint.bin").string(), params, sys.meta);
      summary["checkpoint"] = (sdir / "checkpoint.bin").string();
    }
    write_json(sdir / "run_summary.json", summary);
    std::cout << "tune seed=" << seed << ": steps=" << res.steps
              << " final_train_loss=" << res.final_train_loss
              << (res.aborted ? " ABORTED" : "") << " -> " << sdir.string() << "\n";
    if (res.aborted) return 2;

    final_train.push_back(res.final_train_loss);
    final_val.push_back(summary["result"]["final_val_task_ce"].get<double>());
  }

  if (spec.seeds.size() > 1) {
    auto stats = [](const std::vector<double>& v) {
      double mean = 0;
      for (const double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0;
      for (const double x : v) var += (x - mean) * (x - mean);
      var /= static_cast<double>(v.size());
      return json{{"mean", mean}, {"stddev", std::sqrt(var)}};
    };
    json agg;
    agg["command"] = "tune";
    agg["seeds"] = spec.seeds;
    agg["final_train_loss"] = stats(final_train);
    agg["final_val_task_ce"] = stats(final_val);
    write_json(out / "aggregate.json", agg);
  }
  return 0;
}

int cmd_eval(const RunSpec& spec, RunConfig rc) {
  const fs::path out = prepare_out_dir(spec);
  const uint64_t seed = spec.seeds.front();
  ModelSystem<float> sys = load_system(rc, "eval");
  const Dataset data = build_dataset(rc.data);
  const std::vector<Example>& split = data.val.empty() ? data.train : data.val;

  const MetricsRecord rec = evaluate(sys.model, sys.head_ptr(), split, rc.train.batch_size,
                                     resolve_seq_len(rc, data), 0);
  json report;
  report["command"] = "eval";
  report["examples"] = split.size();
  report["task_ce"] = rec.loss_task;
  report["distill"] = rec.loss_distill;
  if (!rec.route_task.empty()) report["per_route_ce"] = rec.route_task;

  if (rc.data.kind != DatasetKind::text_corpus) {
    const double acc = exact_match_accuracy(sys.model, sys.head_ptr(), split, 256,
                                            rc.gen.early_exit, rc.gen.cache_mode, seed);
    report["exact_match_accuracy"] = acc;
  }
  report["resolved_config"] = resolved_json(rc);
  write_json(out / "eval.json", report);

  std::cout << "eval: task_ce=" << rec.loss_task;
  for (size_t i = 0; i < rec.route_task.size(); ++i)
    std::cout << " route" << i << "_ce=" << rec.route_task[i];
  if (report.contains("exact_match_accuracy"))
    std::cout << " accuracy=" << report["exact_match_accuracy"].get<double>();
  std::cout << "\n";
  return 0;
}

int cmd_generate(const RunSpec& spec, RunConfig rc) {
  const fs::path out = prepare_out_dir(spec);
  const uint64_t seed = spec.seeds.front();
  ModelSystem<float> sys = load_system(rc, "generate");
  const std::vector<int32_t> prompt = prompt_tokens(rc.gen_prompt);
  GenConfig g = rc.gen;
  g.seed = seed;

  json report;
  GenResult res;
  if (g.early_exit) {
    if (!sys.head) throw ConfigError("gen.early_exit requires a checkpoint with a routing head");
    const GenResult full = generate(sys.model, sys.head_ptr(), prompt, g);
    res = generate_early_exit(sys.model, *sys.head, prompt, g);
    report["acceleration"] = json::parse(
        acceleration_report(res.ledger, full.ledger.wall_clock_s, res.ledger.wall_clock_s));
    report["full_continuation"] = decode_bytes(
        std::span<const int32_t>(full.tokens.data() + full.prompt_len,
                                 full.tokens.size() - static_cast<size_t>(full.prompt_len)));
  } else {
    res = generate(sys.model, sys.head_ptr(), prompt, g);
    report["acceleration"] = json::parse(acceleration_report(res.ledger));
  }
  const std::string continuation = decode_bytes(
      std::span<const int32_t>(res.tokens.data() + res.prompt_len,
                               res.tokens.size() - static_cast<size_t>(res.prompt_len)));
  report["command"] = "generate";
  report["prompt"] = rc.gen_prompt;
  report["tokens"] = res.tokens;
  report["continuation"] = continuation;
  report["resolved_config"] = resolved_json(rc);
  write_json(out / "generation.json", report);
  std::cout << continuation << "\n";
  return 0;
}

struct SweepCell {
  int64_t k = 0, top_k = 0;
  int64_t steps = 0;
  double final_train_loss = 0, val_task_ce = 0, accuracy = 0, ratio = 1.0;
  double wall_clock_s = 0;
  bool aborted = false;
};

int cmd_sweep(const RunSpec& spec, RunConfig rc) {
  const fs::path out = prepare_out_dir(spec);
  const uint64_t seed = spec.seeds.front();
  if (rc.base_checkpoint.empty()) throw ConfigError("sweep requires train.base_checkpoint");

  // Shape check up front, without loading weights.
  std::ifstream side(rc.base_checkpoint + ".json");
  if (!side) throw IoError("cannot open checkpoint sidecar: " + rc.base_checkpoint + ".json");
  const std::string side_text((std::istreambuf_iterator<char>(side)),
                              std::istreambuf_iterator<char>());
  const CheckpointMeta base_meta = meta_from_json(side_text);
  const int64_t n = base_meta.model.n_layers;
  if (rc.sweep_k_max < 1) throw ConfigError("sweep.k_max must be >= 1");
  if (rc.sweep_k_max > n)
    throw ConfigError("sweep.k_max " + std::to_string(rc.sweep_k_max) + " exceeds n_layers " +
                      std::to_string(n));

  std::vector<SweepCell> cells;
  for (int64_t k = 1; k <= rc.sweep_k_max; ++k)
    for (int64_t K = 1; K <= k; ++K) cells.push_back({k, K});

  const Dataset data = build_dataset(rc.data);
  const Preset preset =
      preset_uses_mod(rc.train.preset) ? rc.train.preset : Preset::mod_only;

  auto run_cell = [&](SweepCell& cell) {
    ModelSystem<float> sys = load_checkpoint<float>(rc.base_checkpoint);
    attach_for_preset(sys, rc, preset, seed, cell.k, cell.top_k);
    TrainConfig tc = rc.train;
    tc.preset = preset;
    tc.seed = seed;
    tc.max_steps = rc.sweep_max_steps;
    tc.eval_every = std::max<int64_t>(tc.eval_every, 1);
    const TrainResult res = train(sys.model, sys.head_ptr(), data, tc);
    cell.steps = res.steps;
    cell.final_train_loss = res.final_train_loss;
    cell.wall_clock_s = res.wall_clock_s;
    cell.aborted = res.aborted;
    if (res.aborted) return;
    for (const auto& r : res.metrics)
      if (r.split == "val") cell.val_task_ce = r.loss_task;

    const std::vector<Example>& split = data.val.empty() ? data.train : data.val;
    cell.accuracy = exact_match_accuracy(sys.model, sys.head_ptr(), split, 64,
                                         /*early_exit=*/false, CacheMode::none, seed);
    if (cell.top_k < cell.k) {
      ComputeLedger agg;
      agg.n_layers = n;
      const size_t probes = std::min<size_t>(split.size(), 16);
      for (size_t i = 0; i < probes; ++i) {
        GenConfig g;
        g.max_new_tokens = 8;
        g.stop_id = kEosId;
        g.seed = seed;
        const Example& ex = split[i];
        const GenResult r = generate_early_exit(
            sys.model, *sys.head,
            std::span<const int32_t>(ex.tokens.data(), static_cast<size_t>(ex.answer_begin)),
            g);
        for (const auto& t : r.ledger.per_token) agg.add(t.layers_computed, t.deepest_route_layer);
      }
      cell.ratio = agg.layer_forward_ratio();
    } else {
      cell.ratio = 1.0;  // dense diagonal: nothing can be skipped
    }
  };

  const int64_t workers = sweep_workers(cells.size());
  std::atomic<size_t> next{0};
  std::vector<std::exception_ptr> errors(cells.size());
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        run_cell(cells[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::ostringstream csv;
  csv << "# modtune.sweep.v1 n_layers=" << n << "\n";
  csv << "k,top_k,steps,final_train_loss,val_task_ce,accuracy,layer_forward_ratio,wall_clock_s\n";
  csv.precision(17);
  bool any_aborted = false;
  for (const auto& c : cells) {
    csv << c.k << ',' << c.top_k << ',' << c.steps << ',' << c.final_train_loss << ','
        << c.val_task_ce << ',' << c.accuracy << ',' << c.ratio << ',' << c.wall_clock_s << "\n";
    any_aborted = any_aborted || c.aborted;
  }
  write_file(out / "sweep.csv", csv.str());

  json summary;
  summary["command"] = "sweep";
  summary["seed"] = seed;
  summary["cells"] = cells.size();
  summary["k_max"] = rc.sweep_k_max;
  summary["preset"] = preset_name(preset);
  summary["workers"] = workers;
  summary["resolved_config"] = resolved_json(rc);
  write_json(out / "sweep_summary.json", summary);
  std::cout << "sweep: " << cells.size() << " cells -> " << (out / "sweep.csv").string()
            << (any_aborted ? " (some cells ABORTED)" : "") << "\n";
  return any_aborted ? 2 : 0;
}

// --- gradcheck ---

struct GradIssue {
  std::string name;
  int64_t index = 0;
  double analytic = 0, fd = 0, rel = 0;
};

struct GradReport {
  double max_rel = 0;
  GradIssue worst;
  std::vector<GradIssue> failures;
  int64_t checked = 0;
};

template <typename T>
GradReport finite_difference_check(std::vector<NamedParam<T>>& params,
                                   const std::function<Tensor<T>()>& loss_graph, double h,
                                   double tol) {
  GradReport rep;

  // One analytic pass.
  std::map<std::string, std::vector<T>> analytic;
  {
    for (auto& np : params) np.tensor.zero_grad();
    Tape<T> tape;
    Tensor<T> loss = loss_graph();
    tape.backward(loss);
    for (const auto& np : params) {
      std::vector<T> g(static_cast<size_t>(np.tensor.numel()), T(0));
      if (np.tensor.grad_allocated()) {
        const auto gs = np.tensor.grad();
        g.assign(gs.begin(), gs.end());
      }
      analytic.emplace(np.name, std::move(g));
    }
  }

  auto loss_value = [&]() { return static_cast<double>(loss_graph().item()); };

  for (auto& np : params) {
    auto vals = np.tensor.values();
    const auto& g = analytic.at(np.name);
    for (int64_t i = 0; i < np.tensor.numel(); ++i) {
      const T orig = vals[static_cast<size_t>(i)];
      vals[static_cast<size_t>(i)] = orig + static_cast<T>(h);
      const double up = loss_value();
      vals[static_cast<size_t>(i)] = orig - static_cast<T>(h);
      const double down = loss_value();
      vals[static_cast<size_t>(i)] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = static_cast<double>(g[static_cast<size_t>(i)]);
      const double rel = std::abs(an - fd) / std::max(1e-6, std::abs(an) + std::abs(fd));
      ++rep.checked;
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = {np.name, i, an, fd, rel};
      }
      if (rel >= tol && rep.failures.size() < 10) rep.failures.push_back({np.name, i, an, fd, rel});
    }
  }
  return rep;
}

int cmd_gradcheck(const RunSpec& spec, RunConfig /*rc*/) {
  const fs::path out = prepare_out_dir(spec);
  const uint64_t seed = spec.seeds.front();
  using D = double;

  // Tiny double-precision system exercising every parameter group.
  ModelConfig mc;
  mc.vocab_size = 11;
  mc.d_model = 8;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.max_seq_len = 16;
  mc.seed = seed;
  mc.validate();
  TransformerModel<D> model = init_model<D>(mc);
  LoraConfig lc;
  lc.rank = 2;
  lc.alpha = 4.0;
  lc.validate(mc);
  inject(model, lc, seed);
  ModConfig modc;
  modc.k = 2;
  modc.lambda = 0.5;
  // Finite differences measure the full derivative, so the teacher must be
  // live here; a detached teacher would disagree with FD by design.
  modc.detach_teacher = false;
  modc.validate(mc);
  ModHead<D> head = init_head(model, modc, seed);

  // Fixed batch with one padded row so the mask path is exercised.
  Rng rng(derive_seed(seed, "gradcheck-batch"));
  Tokens inputs;
  inputs.rows = 2;
  inputs.cols = 6;
  std::vector<int32_t> targets;
  std::vector<uint8_t> mask;
  for (int64_t i = 0; i < inputs.numel(); ++i)
    inputs.ids.push_back(static_cast<int32_t>(rng.uniform_int(0, mc.vocab_size)));
  for (int64_t i = 0; i < inputs.numel(); ++i)
    targets.push_back(static_cast<int32_t>(rng.uniform_int(0, mc.vocab_size)));
  for (int64_t i = 0; i < inputs.numel(); ++i) mask.push_back(i < 10 ? 1 : 0);

  auto params = model.named_params();
  {
    auto hp = head.named_params();
    params.insert(params.end(), hp.begin(), hp.end());
  }
  for (auto& np : params) np.tensor.set_requires_grad(true);

  auto make_loss = [&]() -> Tensor<D> {
    ForwardTrace<D> trace = forward(model, inputs);
    const bool want_probs = head.cfg.lambda > 0 && head.cfg.k > 1;
    EnsembleOutput<D> ens = ensemble(model, head, trace, want_probs);
    return mod_losses(head, ens, targets, &mask, /*route_diagnostics=*/false).total;
  };

  constexpr double kTol = 1e-4;
  json report;
  report["command"] = "gradcheck";
  report["seed"] = seed;
  report["tolerance"] = kTol;
  bool ok = true;
  for (const double lambda : {0.5, 0.0}) {
    head.cfg.lambda = lambda;
    const GradReport rep =
        finite_difference_check<D>(params, make_loss, /*h=*/1e-5, kTol);
    const bool pass = rep.failures.empty();
    ok = ok && pass;
    json jr;
    jr["lambda"] = lambda;
    jr["checked"] = rep.checked;
    jr["max_rel_err"] = rep.max_rel;
    jr["worst"] = {{"param", rep.worst.name}, {"index", rep.worst.index},
                   {"analytic", rep.worst.analytic}, {"fd", rep.worst.fd}};
    jr["pass"] = pass;
    for (const auto& f : rep.failures)
      jr["failures"].push_back({{"param", f.name}, {"index", f.index},
                                {"analytic", f.analytic}, {"fd", f.fd}, {"rel", f.rel}});
    report["runs"].push_back(jr);
    std::cout << "gradcheck lambda=" << lambda << ": " << (pass ? "PASS" : "FAIL")
              << " checked=" << rep.checked << " max_rel_err=" << rep.max_rel << " (worst: "
              << rep.worst.name << "[" << rep.worst.index << "])\n";
    for (const auto& f : rep.failures)
      std::cout << "  FAIL " << f.name << "[" << f.index << "] analytic=" << f.analytic
                << " fd=" << f.fd << " rel=" << f.rel << "\n";
  }
  report["pass"] = ok;
  write_json(out / "gradcheck.json", report);
  if (!ok) throw NumericError("gradient check failed; see gradcheck.json");
  return 0;
}

int cmd_analyze(const RunSpec& spec, RunConfig rc) {
  const fs::path out = prepare_out_dir(spec);
  if (rc.analyze_metrics.empty()) throw ConfigError("analyze requires analyze.metrics");

  int64_t k = 0;
  const std::vector<MetricsRecord> records = read_metrics_csv(rc.analyze_metrics, &k);
  if (k < 1) throw ConfigError("metrics file has no routes (k=0): " + rc.analyze_metrics);

  std::vector<const MetricsRecord*> train_recs;
  for (const auto& r : records)
    if (r.split == "train" && static_cast<int64_t>(r.route_sparsity.size()) == k)
      train_recs.push_back(&r);
  if (train_recs.empty())
    throw ConfigError("no train records with routing stats in " + rc.analyze_metrics);

  auto series = [&](auto getter) {
    std::vector<std::vector<double>> per_route(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
      std::vector<double> s;
      s.reserve(train_recs.size());
      for (const auto* r : train_recs) s.push_back(getter(*r, i));
      per_route[static_cast<size_t>(i)] = smooth(s, static_cast<int>(rc.analyze_window));
    }
    return per_route;
  };
  const auto sp = series([](const MetricsRecord& r, int64_t i) { return r.route_sparsity[i]; });
  const auto mu = series([](const MetricsRecord& r, int64_t i) { return r.route_mean[i]; });
  const auto var = series([](const MetricsRecord& r, int64_t i) { return r.route_var[i]; });

  std::ostringstream csv;
  csv << "# modtune.analyze.v1 k=" << k << " window=" << rc.analyze_window << "\n";
  csv << "step";
  for (int64_t i = 0; i < k; ++i) csv << ",sparsity_" << i;
  for (int64_t i = 0; i < k; ++i) csv << ",mean_" << i;
  for (int64_t i = 0; i < k; ++i) csv << ",var_" << i;
  csv << "\n";
  csv.precision(17);
  for (size_t row = 0; row < train_recs.size(); ++row) {
    csv << train_recs[row]->step;
    for (int64_t i = 0; i < k; ++i) csv << ',' << sp[static_cast<size_t>(i)][row];
    for (int64_t i = 0; i < k; ++i) csv << ',' << mu[static_cast<size_t>(i)][row];
    for (int64_t i = 0; i < k; ++i) csv << ',' << var[static_cast<size_t>(i)][row];
    csv << "\n";
  }
  write_file(out / "routes_smoothed.csv", csv.str());
  std::cout << "analyze: " << train_recs.size() << " rows -> "
            << (out / "routes_smoothed.csv").string() << "\n";
  return 0;
}

}  // namespace

int run(const RunSpec& spec_in) {
  try {
    RunSpec spec = spec_in;
    if (spec.seeds.empty()) spec.seeds = {0};
    RunConfig rc = load_run_config(spec);
    if (spec.command == "pretrain") return cmd_pretrain(spec, std::move(rc));
    if (spec.command == "tune") return cmd_tune(spec, std::move(rc));
    if (spec.command == "eval") return cmd_eval(spec, std::move(rc));
    if (spec.command == "generate") return cmd_generate(spec, std::move(rc));
    if (spec.command == "sweep") return cmd_sweep(spec, std::move(rc));
    if (spec.command == "gradcheck") return cmd_gradcheck(spec, std::move(rc));
    if (spec.command == "analyze") return cmd_analyze(spec, std::move(rc));
    throw ConfigError("unknown command: " + spec.command);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace modtune
