#include <set>

#include "doctest.h"
#include "modtune/model.hpp"
#include "modtune/ops.hpp"
#include "testing_util.hpp"

using namespace modtune;
using modtune::testing::bitwise_equal;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.vocab_size = 37;
  cfg.d_model = 16;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 12;
  cfg.seed = 5;
  return cfg;
}

Tokens make_tokens(std::vector<int32_t> ids, int64_t rows, int64_t cols) {
  Tokens t;
  t.rows = rows;
  t.cols = cols;
  t.ids = std::move(ids);
  return t;
}

}  // namespace

TEST_CASE("config validation rejects degenerate shapes") {
  ModelConfig cfg = small_cfg();
  CHECK_NOTHROW(cfg.validate());
  cfg.n_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.d_model = 15;  // not divisible by n_heads
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.max_seq_len = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.vocab_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("initialization is deterministic and biases start at zero") {
  auto a = init_model<float>(small_cfg());
  auto b = init_model<float>(small_cfg());
  const auto pa = a.named_params();
  const auto pb = b.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(bitwise_equal(pa[i].tensor, pb[i].tensor));
  }
  ModelConfig other = small_cfg();
  other.seed = 6;
  auto c = init_model<float>(other);
  CHECK_FALSE(bitwise_equal(a.tok_emb, c.tok_emb));

  for (float v : a.blocks[0].attn_q.b.values()) CHECK(v == 0.0f);
  for (float v : a.final_beta.values()) CHECK(v == 0.0f);
  for (float v : a.final_gamma.values()) CHECK(v == 1.0f);
}

TEST_CASE("parameter count matches the closed form from layer shapes") {
  ModelConfig cfg;
  cfg.vocab_size = 256;
  cfg.d_model = 32;
  cfg.n_layers = 4;
  cfg.n_heads = 4;
  cfg.d_ff = 128;
  cfg.max_seq_len = 64;
  cfg.tie_embeddings = false;
  auto model = init_model<float>(cfg);

  const int64_t d = cfg.d_model, V = cfg.vocab_size, ff = cfg.d_ff;
  const int64_t per_block = 2 * d              // first norm
                            + 4 * (d * d + d)  // q, k, v, o projections
                            + 2 * d            // second norm
                            + (d * ff + ff)    // mlp in
                            + (ff * d + d);    // mlp out
  const int64_t expected = V * d + cfg.max_seq_len * d + cfg.n_layers * per_block +
                           2 * d      // final norm
                           + V * d    // untied unembedding
                           + V;       // unembedding bias
  const auto params = model.named_params();
  CHECK(count_params(params, false) == expected);

  ModelConfig tied = cfg;
  tied.tie_embeddings = true;
  const auto tied_params = init_model<float>(tied).named_params();
  CHECK(count_params(tied_params, false) == expected - V * d);
}

TEST_CASE("tied embeddings register the shared matrix exactly once") {
  auto model = init_model<float>(small_cfg());
  CHECK(model.lm_w.same_storage(model.tok_emb));
  std::set<std::string> names;
  const void* emb_storage = model.tok_emb.storage_id();
  int shared_count = 0;
  for (const auto& np : model.named_params()) {
    CHECK(names.insert(np.name).second);  // unique names
    if (np.tensor.storage_id() == emb_storage) ++shared_count;
  }
  CHECK(shared_count == 1);
}

TEST_CASE("registry order ends with the final norm") {
  const auto params = init_model<float>(small_cfg()).named_params();
  REQUIRE(params.size() >= 2);
  CHECK(params[params.size() - 2].name == "base.final_norm.gamma");
  CHECK(params[params.size() - 1].name == "base.final_norm.beta");
}

TEST_CASE("forward produces a complete trace with causal dependencies only") {
  auto model = init_model<float>(small_cfg());
  auto toks = make_tokens({1, 2, 3, 4, 5, 6}, 1, 6);
  auto trace = forward(model, toks);
  REQUIRE(trace.hiddens.size() == 4);  // H_0..H_3
  CHECK(trace.layers_done() == 3);
  for (const auto& h : trace.hiddens) {
    CHECK(h.dims() == std::vector<int64_t>{1, 6, 16});
  }

  // Perturbing position 3 must leave every layer's states at positions < 3
  // untouched, and must change the final layer at position 3.
  auto perturbed = make_tokens({1, 2, 3, 9, 5, 6}, 1, 6);
  auto trace2 = forward(model, perturbed);
  for (size_t layer = 0; layer < trace.hiddens.size(); ++layer) {
    for (int64_t pos = 0; pos < 3; ++pos) {
      for (int64_t c = 0; c < 16; ++c) {
        CHECK(trace.hiddens[layer].at({0, pos, c}) == trace2.hiddens[layer].at({0, pos, c}));
      }
    }
  }
  bool changed = false;
  for (int64_t c = 0; c < 16; ++c) {
    changed = changed || trace.hiddens.back().at({0, 3, c}) != trace2.hiddens.back().at({0, 3, c});
  }
  CHECK(changed);
}

TEST_CASE("rows of a batch are processed independently") {
  auto model = init_model<float>(small_cfg());
  auto single = forward(model, make_tokens({7, 8, 9, 10}, 1, 4));
  auto batch = forward(model, make_tokens({1, 1, 1, 1, 7, 8, 9, 10, 2, 2, 2, 2}, 3, 4));
  for (int64_t pos = 0; pos < 4; ++pos) {
    for (int64_t c = 0; c < 16; ++c) {
      CHECK(single.hiddens.back().at({0, pos, c}) ==
            doctest::Approx(batch.hiddens.back().at({1, pos, c})).epsilon(1e-6));
    }
  }
}

TEST_CASE("forward validates token range and sequence length") {
  auto model = init_model<float>(small_cfg());
  CHECK_THROWS_AS(forward(model, make_tokens({40}, 1, 1)), IndexError);
  CHECK_THROWS_AS(forward(model, make_tokens({-1}, 1, 1)), IndexError);
  std::vector<int32_t> long_ids(13, 1);
  CHECK_THROWS_AS(forward(model, make_tokens(long_ids, 1, 13)), ValidationError);
}

TEST_CASE("partial forward plus extension equals the full forward") {
  auto model = init_model<float>(small_cfg());
  auto toks = make_tokens({3, 1, 4, 1, 5}, 1, 5);
  auto full = forward(model, toks);

  auto part = forward_partial(model, toks, 1);
  CHECK(part.hiddens.size() == 2);
  forward_extend(model, part, 3);
  REQUIRE(part.hiddens.size() == full.hiddens.size());
  for (size_t i = 0; i < full.hiddens.size(); ++i) {
    CHECK(bitwise_equal(part.hiddens[i], full.hiddens[i]));
  }
  forward_extend(model, part, 3);  // no-op when already there
  CHECK(part.hiddens.size() == full.hiddens.size());
  CHECK_THROWS_AS(forward_partial(model, toks, 4), ValidationError);
}

TEST_CASE("final_logits applies the final norm then the unembedding") {
  auto model = init_model<float>(small_cfg());
  auto toks = make_tokens({1, 2, 3}, 1, 3);
  auto trace = forward(model, toks);
  auto logits = final_logits(model, trace);
  CHECK(logits.dims() == std::vector<int64_t>{1, 3, 37});

  auto manual = head_logits(model, trace.hiddens.back(), model.final_gamma, model.final_beta);
  CHECK(bitwise_equal(logits, manual));
}

TEST_CASE("parameter group filters count disjoint subsets") {
  auto model = init_model<float>(small_cfg());
  auto params = model.named_params();
  const int64_t total = count_params(params, false);
  const int64_t base = count_params(params, false, ParamGroup::base);
  CHECK(base == total);
  CHECK(count_params(params, false, ParamGroup::lora) == 0);
  CHECK(count_params(params, false, ParamGroup::mod_routing) == 0);

  // With everything frozen, the trainable count is zero.
  for (auto& np : params) np.tensor.set_requires_grad(false);
  CHECK(count_params(params, true) == 0);
}
