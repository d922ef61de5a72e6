#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "modtune/checkpoint.hpp"
#include "testing_util.hpp"

using namespace modtune;
using modtune::testing::bitwise_equal;
namespace fs = std::filesystem;

namespace {

ModelConfig ckpt_model_cfg() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 8;
  cfg.seed = 12;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / name; }

void drop(const fs::path& p) {
  fs::remove(p);
  fs::remove(p.string() + ".json");
}

template <typename T>
ModelSystem<T> make_system() {
  ModelSystem<T> sys;
  sys.meta.model = ckpt_model_cfg();
  sys.model = init_model<T>(sys.meta.model);
  LoraConfig lc;
  lc.rank = 2;
  lc.alpha = 4;
  inject(sys.model, lc, 77);
  sys.meta.lora = lc;
  ModConfig mc;
  mc.k = 2;
  mc.top_k = 1;
  mc.lambda = 0.25;
  sys.head = init_head(sys.model, mc, 78);
  sys.meta.mod = mc;
  return sys;
}

// Scramble parameters away from their seeded init so a reload that silently
// re-initialized instead of reading the file would be caught.
template <typename T>
void perturb(ModelSystem<T>& sys) {
  Rng rng(5150);
  for (auto& np : sys.all_params()) {
    for (T& v : np.tensor.values()) v += static_cast<T>(rng.uniform() - 0.5);
  }
}

}  // namespace

TEST_CASE("float checkpoints round-trip bitwise") {
  auto sys = make_system<float>();
  perturb(sys);
  const auto path = tmp("modtune_ckpt_f32.bin");
  save_checkpoint(path.string(), sys.all_params(), sys.meta);

  auto back = load_checkpoint<float>(path.string());
  const auto want = modtune::testing::snapshot(sys.all_params());
  auto got = back.all_params();
  REQUIRE(got.size() == want.size());
  for (const auto& np : got) {
    INFO("param " << np.name);
    CHECK(bitwise_equal(np.tensor, want.at(np.name)));
  }

  CHECK(back.meta.model.d_model == 16);
  CHECK(back.meta.model.seed == 12);
  REQUIRE(back.meta.mod.has_value());
  CHECK(back.meta.mod->k == 2);
  REQUIRE(back.meta.mod->top_k.has_value());
  CHECK(*back.meta.mod->top_k == 1);
  CHECK(back.meta.mod->lambda == 0.25);
  REQUIRE(back.meta.lora.has_value());
  CHECK(back.meta.lora->rank == 2);
  CHECK(back.model.has_lora);
  REQUIRE(back.head.has_value());
  drop(path);
}

TEST_CASE("double checkpoints round-trip bitwise") {
  auto sys = make_system<double>();
  perturb(sys);
  const auto path = tmp("modtune_ckpt_f64.bin");
  save_checkpoint(path.string(), sys.all_params(), sys.meta);
  auto back = load_checkpoint<double>(path.string());
  const auto want = modtune::testing::snapshot(sys.all_params());
  for (const auto& np : back.all_params()) {
    CHECK(bitwise_equal(np.tensor, want.at(np.name)));
  }
  drop(path);
}

TEST_CASE("saving a reloaded system reproduces the file byte for byte") {
  auto sys = make_system<float>();
  perturb(sys);
  const auto p1 = tmp("modtune_ckpt_a.bin");
  const auto p2 = tmp("modtune_ckpt_b.bin");
  save_checkpoint(p1.string(), sys.all_params(), sys.meta);
  // Re-saving the same system is trivially identical...
  save_checkpoint(p2.string(), sys.all_params(), sys.meta);
  CHECK(slurp(p1) == slurp(p2));
  // ...and so is saving a round-tripped copy.
  auto back = load_checkpoint<float>(p1.string());
  save_checkpoint(p2.string(), back.all_params(), back.meta);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(p1.string() + ".json") == slurp(p2.string() + ".json"));
  drop(p1);
  drop(p2);
}

TEST_CASE("loading under the wrong element type is refused") {
  auto sys = make_system<float>();
  const auto path = tmp("modtune_ckpt_dtype.bin");
  save_checkpoint(path.string(), sys.all_params(), sys.meta);
  CHECK_THROWS_AS(load_checkpoint<double>(path.string()), IoError);
  drop(path);
}

TEST_CASE("corrupted containers are rejected") {
  auto sys = make_system<float>();
  const auto path = tmp("modtune_ckpt_corrupt.bin");
  save_checkpoint(path.string(), sys.all_params(), sys.meta);
  const std::string good = slurp(path);

  SUBCASE("flipped magic") {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  SUBCASE("truncation") {
    spit(path, good.substr(0, good.size() - 10));
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  SUBCASE("trailing garbage") {
    spit(path, good + "extra");
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  SUBCASE("missing sidecar") {
    fs::remove(path.string() + ".json");
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  SUBCASE("unparseable sidecar") {
    spit(path.string() + ".json", "{oops");
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  SUBCASE("sidecar missing required fields") {
    spit(path.string() + ".json", "{\"model\": {\"d_model\": 16}}");
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  SUBCASE("sidecar disagreeing with the container shapes") {
    auto j = slurp(path.string() + ".json");
    const auto pos = j.find("\"d_model\": 16");
    REQUIRE(pos != std::string::npos);
    j.replace(pos, std::string("\"d_model\": 16").size(), "\"d_model\": 8");
    spit(path.string() + ".json", j);
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), IoError);
  }
  drop(path);
}

TEST_CASE("sidecar JSON round-trips each optional section") {
  CheckpointMeta meta;
  meta.model = ckpt_model_cfg();

  SUBCASE("model only") {
    const auto back = meta_from_json(meta_to_json(meta));
    CHECK(back.model.vocab_size == 64);
    CHECK(back.model.tie_embeddings == meta.model.tie_embeddings);
    CHECK(back.model.norm_eps == meta.model.norm_eps);
    CHECK_FALSE(back.mod.has_value());
    CHECK_FALSE(back.lora.has_value());
  }
  SUBCASE("dense-routing head omits top_k") {
    ModConfig mc;
    mc.k = 3;
    mc.detach_teacher = false;
    mc.epsilon_sparsity = 1e-4;
    meta.mod = mc;
    const auto back = meta_from_json(meta_to_json(meta));
    REQUIRE(back.mod.has_value());
    CHECK(back.mod->k == 3);
    CHECK_FALSE(back.mod->top_k.has_value());
    CHECK(back.mod->detach_teacher == false);
    CHECK(back.mod->epsilon_sparsity == 1e-4);
  }
  SUBCASE("adapter config keeps targets and mask") {
    LoraConfig lc;
    lc.rank = 4;
    lc.alpha = 8;
    lc.target_projections = {LoraTarget::attn_k, LoraTarget::mlp_in};
    lc.layer_mask = {true, false};
    meta.lora = lc;
    const auto back = meta_from_json(meta_to_json(meta));
    REQUIRE(back.lora.has_value());
    CHECK(back.lora->rank == 4);
    CHECK(back.lora->alpha == 8);
    REQUIRE(back.lora->target_projections.size() == 2);
    CHECK(back.lora->target_projections[0] == LoraTarget::attn_k);
    CHECK(back.lora->target_projections[1] == LoraTarget::mlp_in);
    CHECK(back.lora->layer_mask == std::vector<bool>{true, false});
  }
  CHECK_THROWS_AS(meta_from_json("not json at all"), IoError);
}
