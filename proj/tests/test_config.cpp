#include <string>
#include <vector>

#include "doctest.h"
#include "modtune/config.hpp"

using namespace modtune;

namespace {

std::string render(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string text;
  for (const auto& [k, v] : kv) text += k + " = " + v + "\n";
  return text;
}

}  // namespace

TEST_CASE("key-value parser: comments, trimming, and first-equals split") {
  auto kv = KeyValueConfig::parse_string(
      "# full-line comment\n"
      "  a.b = 3   # trailing comment\n"
      "\n"
      "x.y=hello world\n"
      "eq = a=b\n");
  CHECK(kv.has("a.b"));
  CHECK_FALSE(kv.has("a.c"));
  CHECK(kv.get_int("a.b", -1) == 3);
  CHECK(kv.get_str("x.y", "") == "hello world");
  CHECK(kv.get_str("eq", "") == "a=b");  // only the first '=' separates
  CHECK(kv.get_str("absent", "fallback") == "fallback");
  CHECK(kv.get_int("absent", 42) == 42);
  kv.reject_unused();
}

TEST_CASE("key-value parser reports line and origin on malformed input") {
  try {
    KeyValueConfig::parse_string("a = 1\njust words\n", "my.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:2") != std::string::npos);
  }

  try {
    KeyValueConfig::parse_string("a = 1\na = 2\n", "dup.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("duplicate key 'a'") != std::string::npos);
    CHECK(msg.find("first on line 1") != std::string::npos);
  }

  CHECK_THROWS_AS(KeyValueConfig::parse_string("= 5\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse_file("/nonexistent/modtune.cfg"), IoError);
}

TEST_CASE("typed getters refuse values of the wrong shape") {
  auto kv = KeyValueConfig::parse_string(
      "i = abc\n"
      "j = 12x\n"
      "r = 1.2.3\n"
      "b = yes\n"
      "u = -3\n"
      "t = true\n"
      "f = 0\n"
      "n = -17\n");
  CHECK_THROWS_AS(kv.get_int("i", 0), ConfigError);
  CHECK_THROWS_AS(kv.get_int("j", 0), ConfigError);
  CHECK_THROWS_AS(kv.get_real("r", 0.0), ConfigError);
  CHECK_THROWS_AS(kv.get_bool("b", false), ConfigError);
  CHECK_THROWS_AS(kv.get_uint("u", 0), ConfigError);
  CHECK(kv.get_bool("t", false));
  CHECK_FALSE(kv.get_bool("f", true));
  CHECK(kv.get_int("n", 0) == -17);
  kv.reject_unused();  // failed reads still count as consumed
}

TEST_CASE("unconsumed keys are hard errors that list every stray key") {
  auto kv = KeyValueConfig::parse_string("used = 1\nstray.one = x\nstray.two = y\n", "r.cfg");
  CHECK(kv.get_int("used", 0) == 1);
  try {
    kv.reject_unused();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stray.one") != std::string::npos);
    CHECK(msg.find("stray.two") != std::string::npos);
    CHECK(msg.find("r.cfg:2") != std::string::npos);
  }
}

TEST_CASE("run config consumes the full key registry") {
  auto kv = KeyValueConfig::parse_string(
      "model.d_model = 64\n"
      "model.n_layers = 4\n"
      "mod.enabled = true\n"
      "mod.k = 3\n"
      "mod.top_k = 2\n"
      "mod.lambda = 0.001\n"
      "lora.enabled = true\n"
      "lora.rank = 4\n"
      "lora.targets = attn_q,mlp_in\n"
      "lora.exclude_last = 3\n"
      "train.preset = lora_not_k_plus_mod\n"
      "train.lr = 0.002\n"
      "train.base_checkpoint = /tmp/base.bin\n"
      "data.kind = synth_addition\n"
      "data.digits = 2\n"
      "data.seed = 9\n"
      "gen.mode = temperature\n"
      "gen.temperature = 0.7\n"
      "gen.cache_mode = propagate\n"
      "gen.prompt = 12+34=\n"
      "gen.stop_at_eos = false\n"
      "sweep.k_max = 4\n"
      "analyze.window = 5\n");
  const RunConfig rc = RunConfig::from_kv(kv);
  CHECK(rc.model.d_model == 64);
  CHECK(rc.model.n_layers == 4);
  CHECK(rc.mod_enabled);
  CHECK(rc.mod.k == 3);
  REQUIRE(rc.mod.top_k.has_value());
  CHECK(*rc.mod.top_k == 2);
  CHECK(rc.mod.lambda == 0.001);
  CHECK(rc.lora_enabled);
  CHECK(rc.lora.rank == 4);
  REQUIRE(rc.lora.target_projections.size() == 2);
  CHECK(rc.lora.target_projections[0] == LoraTarget::attn_q);
  CHECK(rc.lora.target_projections[1] == LoraTarget::mlp_in);
  CHECK(rc.lora_exclude_last == 3);
  CHECK(rc.train.preset == Preset::lora_not_k_plus_mod);
  CHECK(rc.train.lr == 0.002);
  CHECK(rc.base_checkpoint == "/tmp/base.bin");
  CHECK(rc.data.kind == DatasetKind::synth_addition);
  CHECK(rc.data.digits == 2);
  CHECK(rc.data.seed == 9);
  CHECK(rc.gen.mode == GenMode::temperature_sample);
  CHECK(rc.gen.temperature == 0.7);
  CHECK(rc.gen.cache_mode == CacheMode::propagate);
  CHECK(rc.gen_prompt == "12+34=");
  CHECK_FALSE(rc.gen_stop_at_eos);
  CHECK(rc.gen.stop_id == -1);
  CHECK(rc.sweep_k_max == 4);
  CHECK(rc.analyze_window == 5);

  // Defaults hold where nothing was said.
  CHECK(rc.model.vocab_size == 259);
  CHECK(rc.train.batch_size == 16);
  CHECK(rc.sweep_max_steps == 200);
}

TEST_CASE("run config semantics: dense top_k, EOS stopping, unknown keys") {
  auto dense = KeyValueConfig::parse_string("mod.top_k = 0\n");
  CHECK_FALSE(RunConfig::from_kv(dense).mod.top_k.has_value());

  auto eos = KeyValueConfig::parse_string("");
  const RunConfig rc = RunConfig::from_kv(eos);
  CHECK(rc.gen_stop_at_eos);
  CHECK(rc.gen.stop_id == kEosId);

  auto stray = KeyValueConfig::parse_string("model.dmodel = 64\n");
  CHECK_THROWS_AS(RunConfig::from_kv(stray), ConfigError);

  auto bad_preset = KeyValueConfig::parse_string("train.preset = everything\n");
  CHECK_THROWS_AS(RunConfig::from_kv(bad_preset), ConfigError);
}

TEST_CASE("resolved settings re-parse to the identical resolution") {
  auto kv = KeyValueConfig::parse_string(
      "mod.enabled = true\n"
      "mod.top_k = 2\n"
      "lora.targets = attn_q,attn_o\n"
      "train.preset = mod_only\n"
      "gen.mode = temperature\n"
      "gen.stop_at_eos = false\n"
      "data.kind = text_corpus\n"
      "data.path = /tmp/corpus.txt\n");
  const RunConfig rc = RunConfig::from_kv(kv);
  const auto first = rc.resolved();

  auto kv2 = KeyValueConfig::parse_string(render(first), "<resolved>");
  const RunConfig rc2 = RunConfig::from_kv(kv2);
  CHECK(rc2.resolved() == first);
}

TEST_CASE("enum and target-list conversions round-trip") {
  CHECK(gen_mode_from_string(gen_mode_name(GenMode::greedy)) == GenMode::greedy);
  CHECK(gen_mode_from_string(gen_mode_name(GenMode::temperature_sample)) ==
        GenMode::temperature_sample);
  CHECK_THROWS_AS(gen_mode_from_string("beam"), ConfigError);

  CHECK(cache_mode_from_string(cache_mode_name(CacheMode::none)) == CacheMode::none);
  CHECK(cache_mode_from_string(cache_mode_name(CacheMode::propagate)) == CacheMode::propagate);
  CHECK_THROWS_AS(cache_mode_from_string("paged"), ConfigError);

  const std::vector<LoraTarget> all{LoraTarget::attn_q, LoraTarget::attn_k, LoraTarget::attn_v,
                                    LoraTarget::attn_o, LoraTarget::mlp_in, LoraTarget::mlp_out};
  CHECK(lora_targets_from_string(lora_targets_to_string(all)) == all);
  CHECK(lora_targets_from_string(" attn_q , mlp_in ") ==
        std::vector<LoraTarget>{LoraTarget::attn_q, LoraTarget::mlp_in});
  CHECK_THROWS_AS(lora_targets_from_string("attn_z"), ConfigError);
  CHECK_THROWS_AS(lora_targets_from_string(""), ConfigError);
}
