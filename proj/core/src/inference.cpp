#include "modtune/inference.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <unordered_map>

#include "json.hpp"
#include "modtune/ops.hpp"

namespace modtune {

void GenConfig::validate() const {
  if (max_new_tokens < 1) throw ValidationError("generate: max_new_tokens must be >= 1");
  if (mode == GenMode::temperature_sample && temperature <= 0)
    throw ValidationError("generate: temperature must be > 0");
}

void ComputeLedger::add(int64_t layers_computed, int64_t deepest_route_layer) {
  per_token.push_back({layers_computed, deepest_route_layer});
  total_layer_forwards += layers_computed;
  baseline_layer_forwards += n_layers;
}

double ComputeLedger::layer_forward_ratio() const {
  if (total_layer_forwards == 0) return 1.0;
  return static_cast<double>(baseline_layer_forwards) /
         static_cast<double>(total_layer_forwards);
}

namespace {

using Clock = std::chrono::steady_clock;

// Generation never runs under a tape, so slicing by value copy is safe.
template <typename T>
Tensor<T> last_position(const Tensor<T>& h) {
  const auto& d = h.dims();
  if (d.size() != 3) throw ShapeError("last_position: expected [B x S x d]");
  const int64_t B = d[0], S = d[1], dm = d[2];
  const auto vals = h.values();
  std::vector<T> out(static_cast<size_t>(B * dm));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < dm; ++c)
      out[static_cast<size_t>(b * dm + c)] = vals[static_cast<size_t>((b * S + S - 1) * dm + c)];
  return Tensor<T>::from_data({B, 1, dm}, std::move(out));
}

template <typename T>
int32_t pick_token(const Tensor<T>& logits, const GenConfig& cfg, Rng& rng) {
  if (cfg.mode == GenMode::greedy) return static_cast<int32_t>(ops::argmax_last(logits)[0]);
  const Tensor<T> probs =
      ops::softmax(ops::scale(logits, static_cast<T>(1.0 / cfg.temperature)));
  const auto v = probs.values();
  const double r = rng.uniform();
  double c = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    c += static_cast<double>(v[i]);
    if (r < c) return static_cast<int32_t>(i);
  }
  return static_cast<int32_t>(v.size() - 1);
}

// Weighted sum of the selected routes' exit logits, accumulated in ascending
// route order — the same per-element order ensemble_mix uses, so the full and
// early-exit paths agree bitwise up to the sign of zeros.
template <typename T, typename RouteHidden>
Tensor<T> mix_selected(const TransformerModel<T>& model, const ModHead<T>& head,
                       const std::vector<int>& selected, const Tensor<T>& weights,
                       const RouteHidden& route_hidden) {
  const auto wv = weights.values();
  Tensor<T> acc;
  bool first = true;
  for (const int i : selected) {
    const Tensor<T>& g = head.gammas.empty() ? model.final_gamma : head.gammas[i];
    const Tensor<T>& b = head.betas.empty() ? model.final_beta : head.betas[i];
    Tensor<T> term =
        ops::scale(head_logits(model, route_hidden(i), g, b), wv[static_cast<size_t>(i)]);
    acc = first ? term : ops::add(acc, term);
    first = false;
  }
  return acc;
}

template <typename T>
void check_prompt(const TransformerModel<T>& model, std::span<const int32_t> prompt) {
  if (prompt.empty()) throw ValidationError("generate: empty prompt");
  if (static_cast<int64_t>(prompt.size()) > model.cfg.max_seq_len)
    throw ValidationError("generate: prompt length " + std::to_string(prompt.size()) +
                          " exceeds max_seq_len " + std::to_string(model.cfg.max_seq_len));
}

Tokens as_input(const std::vector<int32_t>& seq) {
  Tokens t;
  t.rows = 1;
  t.cols = static_cast<int64_t>(seq.size());
  t.ids = seq;
  return t;
}

std::vector<int> all_routes(int64_t k) {
  std::vector<int> v(static_cast<size_t>(k));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// --- incremental KV-cache machinery for cache_mode=propagate ---

template <typename T>
struct LayerCache {
  std::optional<Tensor<T>> k, v;  // [1 x S_cached x d]
};

template <typename T>
void cache_append(std::optional<Tensor<T>>& slot, Tensor<T> chunk) {
  slot = slot ? ops::concat<T>({*slot, std::move(chunk)}, 1) : std::move(chunk);
}

// Pre-norm block over the cache. x holds new positions appended after the
// cached prefix; causal masking is only valid when the cache starts empty
// (prefill), while single-position decode attends to everything cached.
template <typename T>
Tensor<T> block_cached(const TransformerModel<T>& model, int64_t j, const Tensor<T>& x,
                       LayerCache<T>& cache, bool causal) {
  const Block<T>& blk = model.blocks[static_cast<size_t>(j)];
  const T eps = static_cast<T>(model.cfg.norm_eps);
  const int64_t nh = model.cfg.n_heads, d = model.cfg.d_model, hd = d / nh;

  Tensor<T> h = ops::layer_norm(x, blk.ln1_gamma, blk.ln1_beta, eps);
  Tensor<T> q = blk.attn_q.apply(h);
  cache_append(cache.k, blk.attn_k.apply(h));
  cache_append(cache.v, blk.attn_v.apply(h));

  const int64_t sq = x.dims()[1], sk = cache.k->dims()[1];
  auto split = [&](const Tensor<T>& t, int64_t s) {
    return ops::permute(ops::reshape(t, {1, s, nh, hd}), {0, 2, 1, 3});
  };
  Tensor<T> scores = ops::scale(ops::bmm_t(split(q, sq), split(*cache.k, sk)),
                                static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  if (causal) scores = ops::apply_causal_mask(scores);
  Tensor<T> ctx = ops::bmm(ops::softmax(scores), split(*cache.v, sk));
  ctx = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {1, sq, d});
  Tensor<T> x1 = ops::add(x, blk.attn_o.apply(ctx));
  Tensor<T> h2 = ops::layer_norm(x1, blk.ln2_gamma, blk.ln2_beta, eps);
  return ops::add(x1, blk.mlp_out.apply(ops::gelu(blk.mlp_in.apply(h2))));
}

// Skipped layers still need cache entries for future steps: fill them from
// the deepest computed hidden, passed through the skipped layer's own input
// norm and key/value projections.
template <typename T>
void fill_skipped(const TransformerModel<T>& model, int64_t j, const Tensor<T>& h_deep,
                  LayerCache<T>& cache) {
  const Block<T>& blk = model.blocks[static_cast<size_t>(j)];
  Tensor<T> hn =
      ops::layer_norm(h_deep, blk.ln1_gamma, blk.ln1_beta, static_cast<T>(model.cfg.norm_eps));
  cache_append(cache.k, blk.attn_k.apply(hn));
  cache_append(cache.v, blk.attn_v.apply(hn));
}

template <typename T>
Tensor<T> embed_chunk(const TransformerModel<T>& model, std::span<const int32_t> toks,
                      int64_t pos0) {
  Tokens tk, ps;
  tk.rows = ps.rows = 1;
  tk.cols = ps.cols = static_cast<int64_t>(toks.size());
  tk.ids.assign(toks.begin(), toks.end());
  ps.ids.resize(toks.size());
  for (size_t i = 0; i < toks.size(); ++i) ps.ids[i] = static_cast<int32_t>(pos0 + i);
  return ops::add(ops::embedding(model.tok_emb, tk), ops::embedding(model.pos_emb, ps));
}

}  // namespace

template <typename T>
GenResult generate(const TransformerModel<T>& model, const ModHead<T>* head,
                   std::span<const int32_t> prompt, const GenConfig& cfg) {
  cfg.validate();
  check_prompt(model, prompt);
  const auto t0 = Clock::now();
  const int64_t n = model.cfg.n_layers;

  GenResult res;
  res.tokens.assign(prompt.begin(), prompt.end());
  res.prompt_len = static_cast<int64_t>(prompt.size());
  res.ledger.n_layers = n;
  Rng rng(derive_seed(cfg.seed, "generate"));

  for (int64_t t = 0; t < cfg.max_new_tokens; ++t) {
    if (static_cast<int64_t>(res.tokens.size()) >= model.cfg.max_seq_len) break;
    const Tokens input = as_input(res.tokens);
    Tensor<T> logits;
    if (head != nullptr) {
      ForwardTrace<T> trace = forward(model, input);
      Tensor<T> x = last_position(trace.hiddens[static_cast<size_t>(head->routing_input_layer())]);
      Tensor<T> weights = head->cfg.top_k ? route_topk(*head, x, *head->cfg.top_k)
                                          : route_dense(*head, x);
      logits = mix_selected(model, *head, all_routes(head->cfg.k), weights, [&](int64_t i) {
        return last_position(trace.hiddens[static_cast<size_t>(head->route_layer(i))]);
      });
    } else {
      ForwardTrace<T> trace = forward(model, input);
      logits = head_logits(model, last_position(trace.hiddens[static_cast<size_t>(n)]),
                           model.final_gamma, model.final_beta);
    }
    res.ledger.add(n, n);
    const int32_t next = pick_token(logits, cfg, rng);
    res.tokens.push_back(next);
    if (next == cfg.stop_id) break;
  }
  res.ledger.wall_clock_s = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

template <typename T>
GenResult generate_early_exit(const TransformerModel<T>& model, const ModHead<T>& head,
                              std::span<const int32_t> prompt, const GenConfig& cfg) {
  cfg.validate();
  check_prompt(model, prompt);
  if (!head.cfg.top_k) throw ConfigError("early exit requires top_k set on the head");
  const auto t0 = Clock::now();
  const int64_t n = model.cfg.n_layers, k = head.cfg.k, K = *head.cfg.top_k;

  GenResult res;
  res.tokens.assign(prompt.begin(), prompt.end());
  res.prompt_len = static_cast<int64_t>(prompt.size());
  res.ledger.n_layers = n;
  Rng rng(derive_seed(cfg.seed, "generate"));

  if (cfg.cache_mode == CacheMode::none) {
    for (int64_t t = 0; t < cfg.max_new_tokens; ++t) {
      if (static_cast<int64_t>(res.tokens.size()) >= model.cfg.max_seq_len) break;
      const Tokens input = as_input(res.tokens);
      ForwardTrace<T> trace = forward_partial(model, input, n - k);
      Tensor<T> x = last_position(trace.hiddens[static_cast<size_t>(n - k)]);
      Tensor<T> scores = route_scores(head, x);
      const std::vector<int> selected =
          route_tiebreak(std::span<const T>(scores.values()), K);
      const int64_t deepest = selected.back();
      forward_extend(model, trace, head.route_layer(deepest));
      Tensor<T> weights = route_topk(head, x, K);
      Tensor<T> logits = mix_selected(model, head, selected, weights, [&](int64_t i) {
        return last_position(trace.hiddens[static_cast<size_t>(head.route_layer(i))]);
      });
      res.ledger.add(n - k + deepest + 1, head.route_layer(deepest));
      const int32_t next = pick_token(logits, cfg, rng);
      res.tokens.push_back(next);
      if (next == cfg.stop_id) break;
    }
    res.ledger.wall_clock_s = std::chrono::duration<double>(Clock::now() - t0).count();
    return res;
  }

  // cache_mode=propagate: incremental decode over per-layer KV caches.
  std::vector<LayerCache<T>> caches(static_cast<size_t>(n));
  auto step = [&](Tensor<T> x, bool causal) -> Tensor<T> {
    for (int64_t j = 0; j < n - k; ++j)
      x = block_cached(model, j, x, caches[static_cast<size_t>(j)], causal);
    Tensor<T> xs = last_position(x);
    Tensor<T> scores = route_scores(head, xs);
    const std::vector<int> selected = route_tiebreak(std::span<const T>(scores.values()), K);
    const int64_t deepest = selected.back();
    const int64_t deep_layer = head.route_layer(deepest);
    std::unordered_map<int64_t, Tensor<T>> slices;
    slices.emplace(n - k, xs);
    for (int64_t j = n - k; j < deep_layer; ++j) {
      x = block_cached(model, j, x, caches[static_cast<size_t>(j)], causal);
      slices.emplace(j + 1, last_position(x));
    }
    for (int64_t j = deep_layer; j < n; ++j)
      fill_skipped(model, j, x, caches[static_cast<size_t>(j)]);
    Tensor<T> weights = route_topk(head, xs, K);
    Tensor<T> logits = mix_selected(model, head, selected, weights, [&](int64_t i) {
      return slices.at(head.route_layer(i));
    });
    res.ledger.add(n - k + deepest + 1, deep_layer);
    return logits;
  };

  Tensor<T> logits = step(embed_chunk(model, prompt, 0), /*causal=*/true);
  for (int64_t t = 0; t < cfg.max_new_tokens; ++t) {
    const int32_t next = pick_token(logits, cfg, rng);
    res.tokens.push_back(next);
    if (next == cfg.stop_id) break;
    if (static_cast<int64_t>(res.tokens.size()) >= model.cfg.max_seq_len) break;
    if (t + 1 == cfg.max_new_tokens) break;
    const int64_t pos = static_cast<int64_t>(res.tokens.size()) - 1;
    const int32_t fed = res.tokens.back();
    logits = step(embed_chunk(model, std::span<const int32_t>(&fed, 1), pos),
                  /*causal=*/false);
  }
  res.ledger.wall_clock_s = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

std::string acceleration_report(const ComputeLedger& ledger, double baseline_wall_s,
                                double early_wall_s) {
  nlohmann::json j;
  j["n_layers"] = ledger.n_layers;
  j["tokens"] = ledger.per_token.size();
  j["layer_forwards"] = ledger.total_layer_forwards;
  j["baseline_layer_forwards"] = ledger.baseline_layer_forwards;
  j["layer_forward_ratio"] = ledger.layer_forward_ratio();
  j["wall_clock_s"] = ledger.wall_clock_s;
  if (baseline_wall_s > 0 && early_wall_s > 0) {
    j["baseline_wall_clock_s"] = baseline_wall_s;
    j["early_wall_clock_s"] = early_wall_s;
    j["wall_clock_ratio"] = baseline_wall_s / early_wall_s;
  }
  auto& per = j["per_token"] = nlohmann::json::array();
  for (const auto& t : ledger.per_token)
    per.push_back({{"layers_computed", t.layers_computed},
                   {"deepest_route_layer", t.deepest_route_layer}});
  return j.dump(2);
}

#define MODTUNE_INSTANTIATE_INFERENCE(T)                                                     \
  template GenResult generate<T>(const TransformerModel<T>&, const ModHead<T>*,             \
                                 std::span<const int32_t>, const GenConfig&);                \
  template GenResult generate_early_exit<T>(const TransformerModel<T>&, const ModHead<T>&,  \
                                            std::span<const int32_t>, const GenConfig&);

MODTUNE_INSTANTIATE_INFERENCE(float)
MODTUNE_INSTANTIATE_INFERENCE(double)

#undef MODTUNE_INSTANTIATE_INFERENCE

}  // namespace modtune
