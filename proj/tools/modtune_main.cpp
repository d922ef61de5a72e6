#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modtune/cli.hpp"

namespace {

struct ParsedFlags {
  std::string config_path;
  std::string out_dir = "out";
  std::vector<uint64_t> seeds;
  std::optional<std::string> preset;
  std::optional<int64_t> k;
  std::optional<int64_t> top_k;
  std::optional<double> lambda;
  bool force = false;
};

void add_common_flags(CLI::App* cmd, ParsedFlags& f) {
  cmd->add_option("--config", f.config_path, "Config file (key = value lines)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out_dir, "Output directory")->capture_default_str();
  cmd->add_option("--seed", f.seeds, "Seed (repeatable; tune runs each seed)");
  cmd->add_option("--preset", f.preset,
                  "Trainable-parameter preset (lora_all, lora_not_k, lora_all_plus_mod, "
                  "lora_not_k_plus_mod, mod_only, full_baseline)");
  cmd->add_option("--k", f.k, "Number of routed final layers");
  cmd->add_option("--top-k", f.top_k, "Routes kept per token (0 = dense routing)");
  cmd->add_option("--lambda", f.lambda, "Distillation loss weight");
  cmd->add_flag("--force", f.force, "Allow writing into a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "modtune: ensemble-over-last-k-layers tuning for decoder-only transformers"};
  app.require_subcommand(1);

  ParsedFlags flags;
  const struct {
    const char* name;
    const char* help;
  } commands[] = {
      {"pretrain", "Train a base model from scratch and save a checkpoint"},
      {"tune", "Fine-tune a checkpoint under a trainable-parameter preset"},
      {"eval", "Report task loss, per-route loss, and exact-match accuracy"},
      {"generate", "Generate a continuation (optionally with early exit)"},
      {"sweep", "Grid over k and top-k, one trained cell each"},
      {"gradcheck", "Finite-difference validation of every parameter group"},
      {"analyze", "Smooth routing-statistics series from a metrics CSV"},
  };
  for (const auto& c : commands) add_common_flags(app.add_subcommand(c.name, c.help), flags);

  CLI11_PARSE(app, argc, argv);

  modtune::RunSpec spec;
  spec.command = app.get_subcommands().front()->get_name();
  spec.config_path = flags.config_path;
  spec.out_dir = flags.out_dir;
  spec.seeds = flags.seeds;
  spec.preset = flags.preset;
  spec.k = flags.k;
  spec.top_k = flags.top_k;
  spec.lambda = flags.lambda;
  spec.force = flags.force;
  return modtune::run(spec);
}
