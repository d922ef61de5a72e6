// Command-level tests: every subcommand is driven in-process through run()
// against tiny synthetic tasks, and the artifacts it leaves behind (JSON
// summaries, CSV schemas, checkpoints, exit codes) are checked byte by byte
// where determinism allows it.
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "modtune/cli.hpp"
#include "modtune/dataset.hpp"

using namespace modtune;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("modtune_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  REQUIRE(out.good());
  out << text;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing file: " << path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) { return json::parse(slurp(path)); }

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string cell;
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

int run_cmd(const std::string& command, const fs::path& cfg, const fs::path& out,
            std::vector<uint64_t> seeds = {}, bool force = false) {
  RunSpec spec;
  spec.command = command;
  spec.config_path = cfg.empty() ? std::string() : cfg.string();
  spec.out_dir = out.string();
  spec.seeds = std::move(seeds);
  spec.force = force;
  return run(spec);
}

// 32 copy examples over 4-byte payloads; small enough that every command
// finishes in well under a second.
std::string data_block() {
  return
      "data.kind = synth_copy\n"
      "data.samples = 32\n"
      "data.payload_len = 4\n"
      "data.val_fraction = 0.125\n"
      "data.seed = 3\n";
}

std::string train_block() {
  return
      "train.lr = 0.003\n"
      "train.batch_size = 8\n"
      "train.max_steps = 8\n"
      "train.eval_every = 4\n"
      "train.seq_len = 16\n";
}

std::string pretrain_config() {
  return
      "model.vocab_size = 259\n"
      "model.d_model = 32\n"
      "model.n_layers = 2\n"
      "model.n_heads = 2\n"
      "model.d_ff = 64\n"
      "model.max_seq_len = 32\n" +
      data_block() + train_block();
}

// Runs a pretrain into <root>/base and returns the checkpoint path.
fs::path make_base_checkpoint(const fs::path& root) {
  const fs::path cfg = root / "pretrain.cfg";
  write_text(cfg, pretrain_config());
  const fs::path out = root / "base";
  REQUIRE(run_cmd("pretrain", cfg, out) == 0);
  return out / "checkpoint.bin";
}

std::string tune_mod_config(const fs::path& base_ckpt) {
  return
      "train.preset = mod_only\n"
      "train.base_checkpoint = " + base_ckpt.string() + "\n"
      "mod.k = 2\n"
      "mod.top_k = 1\n"
      "mod.lambda = 0.001\n" +
      data_block() + train_block();
}

}  // namespace

TEST_CASE("cli: bad invocations fail with the validation exit code") {
  const fs::path root = fresh_dir("badinvoke");

  // Unknown command.
  CHECK(run_cmd("flumox", {}, root / "a") == 1);

  // analyze needs an input metrics file.
  CHECK(run_cmd("analyze", {}, root / "b") == 1);

  // eval / tune / generate / sweep all require a base checkpoint.
  const fs::path cfg = root / "nockpt.cfg";
  write_text(cfg, data_block() + train_block());
  CHECK(run_cmd("eval", cfg, root / "c") == 1);
  CHECK(run_cmd("tune", cfg, root / "d") == 1);
  CHECK(run_cmd("generate", cfg, root / "e") == 1);
  CHECK(run_cmd("sweep", cfg, root / "f") == 1);

  // Missing config file and malformed config file.
  CHECK(run_cmd("pretrain", root / "no_such.cfg", root / "g") == 1);
  const fs::path bad = root / "bad.cfg";
  write_text(bad, "model.d_model\n");
  CHECK(run_cmd("pretrain", bad, root / "h") == 1);

  // A key nobody consumes is a hard error, not a silent typo.
  const fs::path stray = root / "stray.cfg";
  write_text(stray, pretrain_config() + "model.dmodle = 9\n");
  CHECK(run_cmd("pretrain", stray, root / "i") == 1);
}

TEST_CASE("cli: non-empty output directories need force") {
  const fs::path root = fresh_dir("outdir");
  const fs::path cfg = root / "pretrain.cfg";
  write_text(cfg, pretrain_config());

  const fs::path out = root / "occupied";
  fs::create_directories(out);
  write_text(out / "junk.txt", "stale\n");
  CHECK(run_cmd("pretrain", cfg, out) == 1);
  CHECK(run_cmd("pretrain", cfg, out, {}, /*force=*/true) == 0);

  // An existing plain file can never be an output directory.
  const fs::path file_out = root / "afile";
  write_text(file_out, "x");
  CHECK(run_cmd("pretrain", cfg, file_out) == 1);
}

TEST_CASE("cli: pretrain writes its artifacts and reruns bit-identically") {
  const fs::path root = fresh_dir("pretrain");
  const fs::path cfg = root / "pretrain.cfg";
  write_text(cfg, pretrain_config());

  const fs::path out1 = root / "run1";
  REQUIRE(run_cmd("pretrain", cfg, out1) == 0);
  CHECK(fs::exists(out1 / "metrics.csv"));
  CHECK(fs::exists(out1 / "run_summary.json"));
  CHECK(fs::exists(out1 / "checkpoint.bin"));
  CHECK(fs::exists(out1 / "checkpoint.bin.json"));

  const auto lines = split_lines(slurp(out1 / "metrics.csv"));
  REQUIRE(!lines.empty());
  CHECK(lines[0] == "# modtune.metrics.v1 k=0");

  const json summary = read_json(out1 / "run_summary.json");
  CHECK(summary["command"] == "pretrain");
  CHECK(summary["seed"].get<uint64_t>() == 0);
  CHECK(summary["result"]["steps"].get<int64_t>() == 8);
  CHECK_FALSE(summary["result"]["aborted"].get<bool>());
  CHECK(std::isfinite(summary["result"]["final_train_loss"].get<double>()));
  CHECK(summary["result"]["final_train_loss"].get<double>() > 0.0);
  CHECK(summary["result"]["wall_clock_s"].get<double>() >= 0.0);
  CHECK(summary["checkpoint"] == (out1 / "checkpoint.bin").string());
  // The run summary embeds the full effective configuration as strings.
  CHECK(summary["resolved_config"]["model.d_model"] == "32");
  CHECK(summary["resolved_config"]["data.kind"] == "synth_copy");

  // A fixed seed makes the whole run reproducible down to the byte.
  const fs::path out2 = root / "run2";
  REQUIRE(run_cmd("pretrain", cfg, out2) == 0);
  CHECK(slurp(out1 / "checkpoint.bin") == slurp(out2 / "checkpoint.bin"));
  CHECK(slurp(out1 / "metrics.csv") == slurp(out2 / "metrics.csv"));
}

TEST_CASE("cli: a divergent pretrain exits with the numerical-failure code") {
  const fs::path root = fresh_dir("diverge");
  const fs::path cfg = root / "explode.cfg";
  write_text(cfg,
             "model.vocab_size = 259\n"
             "model.d_model = 32\n"
             "model.n_layers = 2\n"
             "model.n_heads = 2\n"
             "model.d_ff = 64\n"
             "model.max_seq_len = 32\n" +
                 data_block() +
                 "train.lr = 1e18\n"
                 "train.batch_size = 8\n"
                 "train.max_steps = 40\n"
                 "train.eval_every = 100\n"
                 "train.seq_len = 16\n");
  const fs::path out = root / "out";
  CHECK(run_cmd("pretrain", cfg, out) == 2);
  // No checkpoint may survive a blown-up run.
  CHECK_FALSE(fs::exists(out / "checkpoint.bin"));
}

TEST_CASE("cli: tune accounts for parameters by group") {
  const fs::path root = fresh_dir("params");
  const fs::path base = make_base_checkpoint(root);

  SUBCASE("lora_all trains adapters only") {
    const fs::path cfg = root / "lora.cfg";
    // mod.k = 1 here only pins the "not-k" reference window for the summary;
    // no head is attached.
    write_text(cfg,
               "train.preset = lora_all\n"
               "train.base_checkpoint = " + base.string() + "\n"
               "lora.enabled = true\n"
               "lora.rank = 2\n"
               "lora.alpha = 4\n"
               "lora.targets = attn_q,attn_v\n"
               "mod.k = 1\n" +
                   data_block() + train_block());
    const fs::path out = root / "lora_out";
    REQUIRE(run_cmd("tune", cfg, out) == 0);

    const json summary = read_json(out / "seed_0" / "run_summary.json");
    CHECK(summary["preset"] == "lora_all");
    const json& p = summary["params"];
    // Two targets, rank 2, d_model 32: 2 * 2*(32+32) = 256 per layer.
    CHECK(p["by_group"]["lora"]["trainable"].get<int64_t>() == 512);
    CHECK(p["by_group"]["lora"]["total"].get<int64_t>() == 512);
    CHECK(p["by_group"]["base"]["trainable"].get<int64_t>() == 0);
    CHECK(p["by_group"]["base"]["total"].get<int64_t>() > 0);
    CHECK(p["by_group"]["mod_routing"]["total"].get<int64_t>() == 0);
    CHECK(p["by_group"]["mod_norms"]["total"].get<int64_t>() == 0);
    CHECK(p["added_trainable"].get<int64_t>() == 512);
    CHECK(p["trainable"].get<int64_t>() == 512);
    // Reference: a lora_not_k run with k = 1 would adapt 1 of 2 layers.
    CHECK(p["lora_not_k_reference"].get<int64_t>() == 256);
    CHECK(p["added_params_pct"].get<double>() == doctest::Approx(200.0));
  }

  SUBCASE("mod_only trains the router and its norms") {
    const fs::path cfg = root / "mod.cfg";
    write_text(cfg, tune_mod_config(base));
    const fs::path out = root / "mod_out";
    REQUIRE(run_cmd("tune", cfg, out) == 0);

    const json summary = read_json(out / "seed_0" / "run_summary.json");
    CHECK(summary["preset"] == "mod_only");
    const json& p = summary["params"];
    // Router: d_model * k = 64. Norms: k routes * (gamma + beta) = 128.
    CHECK(p["by_group"]["mod_routing"]["trainable"].get<int64_t>() == 64);
    CHECK(p["by_group"]["mod_norms"]["trainable"].get<int64_t>() == 128);
    CHECK(p["by_group"]["lora"]["total"].get<int64_t>() == 0);
    CHECK(p["by_group"]["base"]["trainable"].get<int64_t>() == 0);
    CHECK(p["added_trainable"].get<int64_t>() == 192);
    // k equals n_layers, so the not-k reference window is empty.
    CHECK(p["lora_not_k_reference"].get<int64_t>() == 0);
    CHECK(p["added_params_pct"].is_null());

    const auto lines = split_lines(slurp(out / "seed_0" / "metrics.csv"));
    REQUIRE(!lines.empty());
    CHECK(lines[0] == "# modtune.metrics.v1 k=2");
  }
}

TEST_CASE("cli: multi-seed tune writes per-seed runs plus an aggregate") {
  const fs::path root = fresh_dir("seeds");
  const fs::path base = make_base_checkpoint(root);
  const fs::path cfg = root / "tune.cfg";
  write_text(cfg, tune_mod_config(base));

  const fs::path out = root / "tune_out";
  REQUIRE(run_cmd("tune", cfg, out, {1, 2, 3}) == 0);

  for (const char* sdir : {"seed_1", "seed_2", "seed_3"}) {
    CHECK(fs::exists(out / sdir / "metrics.csv"));
    CHECK(fs::exists(out / sdir / "run_summary.json"));
    CHECK(fs::exists(out / sdir / "checkpoint.bin"));
  }
  const json agg = read_json(out / "aggregate.json");
  CHECK(agg["command"] == "tune");
  CHECK(agg["seeds"] == json({1, 2, 3}));
  CHECK(std::isfinite(agg["final_train_loss"]["mean"].get<double>()));
  CHECK(agg["final_train_loss"]["stddev"].get<double>() >= 0.0);
  CHECK(std::isfinite(agg["final_val_task_ce"]["mean"].get<double>()));
  CHECK(agg["final_val_task_ce"]["stddev"].get<double>() >= 0.0);

  // Different seeds actually trained different heads.
  CHECK(slurp(out / "seed_1" / "checkpoint.bin") != slurp(out / "seed_2" / "checkpoint.bin"));
}

TEST_CASE("cli: command-line overrides beat the config file") {
  const fs::path root = fresh_dir("override");
  const fs::path base = make_base_checkpoint(root);
  const fs::path cfg = root / "tune.cfg";
  // Config asks for a dense baseline; the flags turn it into a 1-route head.
  write_text(cfg,
             "train.preset = full_baseline\n"
             "train.base_checkpoint = " + base.string() + "\n"
             "mod.k = 2\n"
             "mod.top_k = 1\n"
             "mod.lambda = 0.001\n" +
                 data_block() + train_block());

  RunSpec spec;
  spec.command = "tune";
  spec.config_path = cfg.string();
  spec.out_dir = (root / "out").string();
  spec.preset = "mod_only";
  spec.k = 1;
  spec.top_k = 0;  // 0 = dense routing
  spec.lambda = 0.0;
  REQUIRE(run(spec) == 0);

  const json summary = read_json(root / "out" / "seed_0" / "run_summary.json");
  CHECK(summary["preset"] == "mod_only");
  CHECK(summary["resolved_config"]["mod.k"] == "1");
  CHECK(summary["resolved_config"]["train.preset"] == "mod_only");
  // k = 1: router is d_model wide, one cloned norm rides along.
  const json& p = summary["params"];
  CHECK(p["by_group"]["mod_routing"]["trainable"].get<int64_t>() == 32);
  CHECK(p["by_group"]["mod_norms"]["trainable"].get<int64_t>() == 64);

  const auto lines = split_lines(slurp(root / "out" / "seed_0" / "metrics.csv"));
  REQUIRE(!lines.empty());
  CHECK(lines[0] == "# modtune.metrics.v1 k=1");
}

TEST_CASE("cli: eval reports losses without touching the checkpoint") {
  const fs::path root = fresh_dir("eval");
  const fs::path base = make_base_checkpoint(root);
  const fs::path tune_cfg = root / "tune.cfg";
  write_text(tune_cfg, tune_mod_config(base));
  REQUIRE(run_cmd("tune", tune_cfg, root / "tuned") == 0);
  const fs::path tuned = root / "tuned" / "seed_0" / "checkpoint.bin";

  SUBCASE("tuned checkpoint: per-route losses and accuracy") {
    const fs::path cfg = root / "eval.cfg";
    write_text(cfg,
               "train.base_checkpoint = " + tuned.string() + "\n" +
               data_block() + train_block());
    const std::string before = slurp(tuned);

    const fs::path out = root / "eval_out";
    REQUIRE(run_cmd("eval", cfg, out) == 0);
    const json rep = read_json(out / "eval.json");
    CHECK(rep["command"] == "eval");
    CHECK(rep["examples"].get<int64_t>() == 4);  // floor(32 * 0.125) held out
    CHECK(std::isfinite(rep["task_ce"].get<double>()));
    CHECK(rep["task_ce"].get<double>() > 0.0);
    CHECK(rep["distill"].get<double>() >= 0.0);
    REQUIRE(rep.contains("per_route_ce"));
    REQUIRE(rep["per_route_ce"].size() == 2);
    for (const auto& ce : rep["per_route_ce"]) CHECK(std::isfinite(ce.get<double>()));
    const double acc = rep["exact_match_accuracy"].get<double>();
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);

    // Evaluation is read-only.
    CHECK(slurp(tuned) == before);
  }

  SUBCASE("plain checkpoint: no route columns") {
    const fs::path cfg = root / "eval_base.cfg";
    write_text(cfg,
               "train.base_checkpoint = " + base.string() + "\n" +
               data_block() + train_block());
    const fs::path out = root / "eval_base_out";
    REQUIRE(run_cmd("eval", cfg, out) == 0);
    const json rep = read_json(out / "eval.json");
    CHECK_FALSE(rep.contains("per_route_ce"));
    CHECK(rep["distill"].get<double>() == 0.0);
    CHECK(rep.contains("exact_match_accuracy"));
  }
}

TEST_CASE("cli: generate writes a continuation report") {
  const fs::path root = fresh_dir("generate");
  const fs::path base = make_base_checkpoint(root);
  const fs::path tune_cfg = root / "tune.cfg";
  write_text(tune_cfg, tune_mod_config(base));
  REQUIRE(run_cmd("tune", tune_cfg, root / "tuned") == 0);
  const fs::path tuned = root / "tuned" / "seed_0" / "checkpoint.bin";

  SUBCASE("early exit on a routed checkpoint") {
    const fs::path cfg = root / "gen.cfg";
    write_text(cfg,
               "train.base_checkpoint = " + tuned.string() + "\n"
               "gen.prompt = abcd|\n"
               "gen.mode = greedy\n"
               "gen.max_new_tokens = 8\n"
               "gen.early_exit = true\n" +
                   data_block() + train_block());
    const fs::path out = root / "gen_out";
    REQUIRE(run_cmd("generate", cfg, out) == 0);

    const json rep = read_json(out / "generation.json");
    CHECK(rep["command"] == "generate");
    CHECK(rep["prompt"] == "abcd|");
    CHECK(rep["continuation"].is_string());
    CHECK(rep["full_continuation"].is_string());
    REQUIRE(rep["tokens"].is_array());
    REQUIRE(!rep["tokens"].empty());
    CHECK(rep["tokens"][0].get<int32_t>() == kBosId);

    const json& acc = rep["acceleration"];
    CHECK(acc["n_layers"].get<int64_t>() == 2);
    CHECK(acc["tokens"].get<int64_t>() >= 1);
    CHECK(acc["layer_forward_ratio"].get<double>() >= 1.0);
    CHECK(acc["layer_forwards"].get<int64_t>() <= acc["baseline_layer_forwards"].get<int64_t>());
  }

  SUBCASE("early exit without a head is a config error") {
    const fs::path cfg = root / "gen_bad.cfg";
    write_text(cfg,
               "train.base_checkpoint = " + base.string() + "\n"
               "gen.prompt = abcd|\n"
               "gen.early_exit = true\n" +
                   data_block() + train_block());
    CHECK(run_cmd("generate", cfg, root / "gen_bad_out") == 1);
  }

  SUBCASE("full-depth generation reports a unit ratio") {
    const fs::path cfg = root / "gen_full.cfg";
    write_text(cfg,
               "train.base_checkpoint = " + base.string() + "\n"
               "gen.prompt = abcd|\n"
               "gen.mode = greedy\n"
               "gen.max_new_tokens = 6\n" +
                   data_block() + train_block());
    const fs::path out = root / "gen_full_out";
    REQUIRE(run_cmd("generate", cfg, out) == 0);
    const json rep = read_json(out / "generation.json");
    CHECK_FALSE(rep.contains("full_continuation"));
    CHECK(rep["acceleration"]["layer_forward_ratio"].get<double>() == 1.0);
  }
}

TEST_CASE("cli: sweep enumerates the k / top-k triangle") {
  const fs::path root = fresh_dir("sweep");
  const fs::path base = make_base_checkpoint(root);
  const fs::path cfg = root / "sweep.cfg";
  write_text(cfg,
             "train.base_checkpoint = " + base.string() + "\n"
             "mod.lambda = 0.001\n"
             "sweep.k_max = 2\n"
             "sweep.max_steps = 4\n" +
                 data_block() + train_block());

  SUBCASE("runs every cell and records the dense diagonal") {
    REQUIRE(setenv("MODTUNE_THREADS", "2", 1) == 0);
    const fs::path out = root / "sweep_out";
    const int rc = run_cmd("sweep", cfg, out);
    unsetenv("MODTUNE_THREADS");
    REQUIRE(rc == 0);

    const auto lines = split_lines(slurp(out / "sweep.csv"));
    REQUIRE(lines.size() == 5);  // schema + header + 3 cells
    CHECK(lines[0] == "# modtune.sweep.v1 n_layers=2");
    CHECK(lines[1] ==
          "k,top_k,steps,final_train_loss,val_task_ce,accuracy,layer_forward_ratio,wall_clock_s");
    std::vector<std::pair<int, int>> cells;
    for (size_t i = 2; i < lines.size(); ++i) {
      const auto f = split_fields(lines[i]);
      REQUIRE(f.size() == 8);
      cells.emplace_back(std::stoi(f[0]), std::stoi(f[1]));
      CHECK(std::stoll(f[2]) == 4);                    // steps
      CHECK(std::isfinite(std::stod(f[3])));           // final_train_loss
      CHECK(std::isfinite(std::stod(f[4])));           // val_task_ce
      const double ratio = std::stod(f[6]);
      CHECK(ratio >= 1.0);
      // Diagonal cells route densely: nothing can be skipped.
      if (f[0] == f[1]) CHECK(ratio == 1.0);
    }
    CHECK(cells == std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {2, 2}});

    const json summary = read_json(out / "sweep_summary.json");
    CHECK(summary["command"] == "sweep");
    CHECK(summary["cells"].get<int64_t>() == 3);
    CHECK(summary["k_max"].get<int64_t>() == 2);
    CHECK(summary["workers"].get<int64_t>() == 2);
    CHECK(summary["preset"] == "mod_only");
  }

  SUBCASE("k_max beyond the layer stack is rejected") {
    const fs::path big = root / "sweep_big.cfg";
    write_text(big,
               "train.base_checkpoint = " + base.string() + "\n"
               "sweep.k_max = 3\n" +
                   data_block() + train_block());
    CHECK(run_cmd("sweep", big, root / "sweep_big_out") == 1);
  }

  SUBCASE("MODTUNE_THREADS must be a positive integer") {
    for (const char* bad : {"abc", "0", "-2", "3x", ""}) {
      CAPTURE(bad);
      REQUIRE(setenv("MODTUNE_THREADS", bad, 1) == 0);
      const int rc = run_cmd("sweep", cfg, root / "sweep_env_out", {}, /*force=*/true);
      unsetenv("MODTUNE_THREADS");
      CHECK(rc == 1);
    }
  }
}

TEST_CASE("cli: gradcheck validates every parameter group against finite differences") {
  const fs::path root = fresh_dir("gradcheck");
  const fs::path out = root / "out";
  REQUIRE(run_cmd("gradcheck", {}, out) == 0);

  const json rep = read_json(out / "gradcheck.json");
  CHECK(rep["command"] == "gradcheck");
  CHECK(rep["pass"].get<bool>());
  CHECK(rep["tolerance"].get<double>() == 1e-4);
  REQUIRE(rep["runs"].size() == 2);  // distillation on and off
  for (const auto& r : rep["runs"]) {
    CHECK(r["pass"].get<bool>());
    CHECK(r["checked"].get<int64_t>() > 0);
    CHECK(r["max_rel_err"].get<double>() < 1e-4);
  }
}

TEST_CASE("cli: analyze smooths the per-route training series") {
  const fs::path root = fresh_dir("analyze");
  const fs::path base = make_base_checkpoint(root);
  const fs::path tune_cfg = root / "tune.cfg";
  write_text(tune_cfg, tune_mod_config(base));
  REQUIRE(run_cmd("tune", tune_cfg, root / "tuned") == 0);
  const fs::path metrics = root / "tuned" / "seed_0" / "metrics.csv";

  // Count the train rows the tune run logged (second CSV field).
  size_t train_rows = 0;
  for (const auto& line : split_lines(slurp(metrics))) {
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    const auto f = split_fields(line);
    if (f.size() > 1 && f[1] == "train") ++train_rows;
  }
  REQUIRE(train_rows > 0);

  const fs::path cfg = root / "analyze.cfg";
  write_text(cfg, "analyze.metrics = " + metrics.string() + "\nanalyze.window = 3\n");
  const fs::path out = root / "analyze_out";
  REQUIRE(run_cmd("analyze", cfg, out) == 0);

  const auto lines = split_lines(slurp(out / "routes_smoothed.csv"));
  REQUIRE(lines.size() == 2 + train_rows);
  CHECK(lines[0] == "# modtune.analyze.v1 k=2 window=3");
  CHECK(lines[1] == "step,sparsity_0,sparsity_1,mean_0,mean_1,var_0,var_1");
  for (size_t i = 2; i < lines.size(); ++i) CHECK(split_fields(lines[i]).size() == 7);

  // Routeless metrics (a pretrain log) cannot be analyzed.
  const fs::path cfg0 = root / "analyze0.cfg";
  write_text(cfg0, "analyze.metrics = " + (root / "base" / "metrics.csv").string() + "\n");
  CHECK(run_cmd("analyze", cfg0, root / "analyze0_out") == 1);
}
