#include "modtune/config.hpp"

#include <fstream>
#include <sstream>

namespace modtune {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_string(text, path);
}

KeyValueConfig KeyValueConfig::parse_string(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    const auto [it, inserted] = cfg.entries_.emplace(key, Entry{value, line_no, false});
    if (!inserted)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key +
                        "' (first on line " + std::to_string(it->second.line) + ")");
  }
  return cfg;
}

bool KeyValueConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

KeyValueConfig::Entry* KeyValueConfig::find(const std::string& key) {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  it->second.used = true;
  return &it->second;
}

void KeyValueConfig::bad_value(const std::string& key, const Entry& e, const char* want) const {
  throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": key '" + key + "' needs a " +
                    want + " value, got '" + e.value + "'");
}

std::string KeyValueConfig::get_str(const std::string& key, const std::string& fallback) {
  const Entry* e = find(key);
  return e ? e->value : fallback;
}

int64_t KeyValueConfig::get_int(const std::string& key, int64_t fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(e->value, &pos);
    if (pos != e->value.size()) bad_value(key, *e, "integer");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, *e, "integer");
  }
}

uint64_t KeyValueConfig::get_uint(const std::string& key, uint64_t fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(e->value, &pos);
    if (pos != e->value.size() || e->value.front() == '-') bad_value(key, *e, "unsigned integer");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, *e, "unsigned integer");
  }
}

double KeyValueConfig::get_real(const std::string& key, double fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  try {
    size_t pos = 0;
    const double v = std::stod(e->value, &pos);
    if (pos != e->value.size()) bad_value(key, *e, "real");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, *e, "real");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  bad_value(key, *e, "boolean (true/false)");
}

void KeyValueConfig::reject_unused() const {
  std::string bad;
  for (const auto& [key, e] : entries_)
    if (!e.used) bad += "\n  " + origin_ + ":" + std::to_string(e.line) + ": " + key;
  if (!bad.empty()) throw ConfigError("unknown config keys:" + bad);
}

const char* gen_mode_name(GenMode m) {
  return m == GenMode::greedy ? "greedy" : "temperature";
}

GenMode gen_mode_from_string(const std::string& s) {
  if (s == "greedy") return GenMode::greedy;
  if (s == "temperature") return GenMode::temperature_sample;
  throw ConfigError("unknown gen.mode: " + s);
}

const char* cache_mode_name(CacheMode m) {
  return m == CacheMode::none ? "none" : "propagate";
}

CacheMode cache_mode_from_string(const std::string& s) {
  if (s == "none") return CacheMode::none;
  if (s == "propagate") return CacheMode::propagate;
  throw ConfigError("unknown gen.cache_mode: " + s);
}

std::string lora_targets_to_string(const std::vector<LoraTarget>& targets) {
  std::string out;
  for (const LoraTarget t : targets) {
    if (!out.empty()) out += ",";
    out += lora_target_name(t);
  }
  return out;
}

std::vector<LoraTarget> lora_targets_from_string(const std::string& s) {
  std::vector<LoraTarget> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    bool found = false;
    for (const LoraTarget t : {LoraTarget::attn_q, LoraTarget::attn_k, LoraTarget::attn_v,
                               LoraTarget::attn_o, LoraTarget::mlp_in, LoraTarget::mlp_out}) {
      if (item == lora_target_name(t)) {
        out.push_back(t);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown lora target: " + item);
  }
  if (out.empty()) throw ConfigError("lora.targets selects nothing: '" + s + "'");
  return out;
}

RunConfig RunConfig::from_file(const std::string& path) {
  KeyValueConfig kv = KeyValueConfig::parse_file(path);
  return from_kv(kv);
}

RunConfig RunConfig::from_kv(KeyValueConfig& kv) {
  RunConfig rc;

  rc.model.vocab_size = kv.get_int("model.vocab_size", rc.model.vocab_size);
  rc.model.d_model = kv.get_int("model.d_model", rc.model.d_model);
  rc.model.n_layers = kv.get_int("model.n_layers", rc.model.n_layers);
  rc.model.n_heads = kv.get_int("model.n_heads", rc.model.n_heads);
  rc.model.d_ff = kv.get_int("model.d_ff", rc.model.d_ff);
  rc.model.max_seq_len = kv.get_int("model.max_seq_len", rc.model.max_seq_len);
  rc.model.norm_eps = kv.get_real("model.norm_eps", rc.model.norm_eps);
  rc.model.tie_embeddings = kv.get_bool("model.tie_embeddings", rc.model.tie_embeddings);

  rc.mod_enabled = kv.get_bool("mod.enabled", rc.mod_enabled);
  rc.mod.k = kv.get_int("mod.k", rc.mod.k);
  const int64_t top_k = kv.get_int("mod.top_k", 0);  // 0 = dense
  rc.mod.top_k = top_k > 0 ? std::optional<int64_t>(top_k) : std::nullopt;
  rc.mod.lambda = kv.get_real("mod.lambda", rc.mod.lambda);
  rc.mod.routing_init_std = kv.get_real("mod.routing_init_std", rc.mod.routing_init_std);
  rc.mod.use_trainable_norms = kv.get_bool("mod.use_trainable_norms", rc.mod.use_trainable_norms);
  rc.mod.detach_teacher = kv.get_bool("mod.detach_teacher", rc.mod.detach_teacher);
  rc.mod.epsilon_sparsity = kv.get_real("mod.epsilon_sparsity", rc.mod.epsilon_sparsity);

  rc.lora_enabled = kv.get_bool("lora.enabled", rc.lora_enabled);
  rc.lora.rank = kv.get_int("lora.rank", rc.lora.rank);
  rc.lora.alpha = kv.get_real("lora.alpha", rc.lora.alpha);
  rc.lora.target_projections =
      lora_targets_from_string(kv.get_str("lora.targets", lora_targets_to_string(rc.lora.target_projections)));
  rc.lora_exclude_last = kv.get_int("lora.exclude_last", rc.lora_exclude_last);

  rc.train.preset = preset_from_string(kv.get_str("train.preset", preset_name(rc.train.preset)));
  rc.train.lr = kv.get_real("train.lr", rc.train.lr);
  rc.train.batch_size = kv.get_int("train.batch_size", rc.train.batch_size);
  rc.train.epochs = kv.get_int("train.epochs", rc.train.epochs);
  rc.train.max_steps = kv.get_int("train.max_steps", rc.train.max_steps);
  rc.train.grad_clip = kv.get_real("train.grad_clip", rc.train.grad_clip);
  rc.train.weight_decay = kv.get_real("train.weight_decay", rc.train.weight_decay);
  rc.train.eval_every = kv.get_int("train.eval_every", rc.train.eval_every);
  rc.train.seq_len = kv.get_int("train.seq_len", rc.train.seq_len);
  rc.base_checkpoint = kv.get_str("train.base_checkpoint", rc.base_checkpoint);

  rc.data.kind = dataset_kind_from_string(kv.get_str("data.kind", dataset_kind_name(rc.data.kind)));
  rc.data.path = kv.get_str("data.path", rc.data.path);
  rc.data.samples = kv.get_int("data.samples", rc.data.samples);
  rc.data.digits = kv.get_int("data.digits", rc.data.digits);
  rc.data.payload_len = kv.get_int("data.payload_len", rc.data.payload_len);
  rc.data.seq_len = kv.get_int("data.seq_len", rc.data.seq_len);
  rc.data.val_fraction = kv.get_real("data.val_fraction", rc.data.val_fraction);
  rc.data.seed = kv.get_uint("data.seed", rc.data.seed);

  rc.gen.mode = gen_mode_from_string(kv.get_str("gen.mode", gen_mode_name(rc.gen.mode)));
  rc.gen.temperature = kv.get_real("gen.temperature", rc.gen.temperature);
  rc.gen.max_new_tokens = kv.get_int("gen.max_new_tokens", rc.gen.max_new_tokens);
  rc.gen.early_exit = kv.get_bool("gen.early_exit", rc.gen.early_exit);
  rc.gen.cache_mode =
      cache_mode_from_string(kv.get_str("gen.cache_mode", cache_mode_name(rc.gen.cache_mode)));
  rc.gen_prompt = kv.get_str("gen.prompt", rc.gen_prompt);
  rc.gen_stop_at_eos = kv.get_bool("gen.stop_at_eos", rc.gen_stop_at_eos);
  rc.gen.stop_id = rc.gen_stop_at_eos ? kEosId : -1;

  rc.sweep_k_max = kv.get_int("sweep.k_max", rc.sweep_k_max);
  rc.sweep_max_steps = kv.get_int("sweep.max_steps", rc.sweep_max_steps);

  rc.analyze_metrics = kv.get_str("analyze.metrics", rc.analyze_metrics);
  rc.analyze_window = kv.get_int("analyze.window", rc.analyze_window);

  kv.reject_unused();
  return rc;
}

std::vector<std::pair<std::string, std::string>> RunConfig::resolved() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto r = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("model.vocab_size", std::to_string(model.vocab_size));
  out.emplace_back("model.d_model", std::to_string(model.d_model));
  out.emplace_back("model.n_layers", std::to_string(model.n_layers));
  out.emplace_back("model.n_heads", std::to_string(model.n_heads));
  out.emplace_back("model.d_ff", std::to_string(model.d_ff));
  out.emplace_back("model.max_seq_len", std::to_string(model.max_seq_len));
  out.emplace_back("model.norm_eps", r(model.norm_eps));
  out.emplace_back("model.tie_embeddings", b(model.tie_embeddings));
  out.emplace_back("mod.enabled", b(mod_enabled));
  out.emplace_back("mod.k", std::to_string(mod.k));
  out.emplace_back("mod.top_k", std::to_string(mod.top_k ? *mod.top_k : 0));
  out.emplace_back("mod.lambda", r(mod.lambda));
  out.emplace_back("mod.routing_init_std", r(mod.routing_init_std));
  out.emplace_back("mod.use_trainable_norms", b(mod.use_trainable_norms));
  out.emplace_back("mod.detach_teacher", b(mod.detach_teacher));
  out.emplace_back("mod.epsilon_sparsity", r(mod.epsilon_sparsity));
  out.emplace_back("lora.enabled", b(lora_enabled));
  out.emplace_back("lora.rank", std::to_string(lora.rank));
  out.emplace_back("lora.alpha", r(lora.alpha));
  out.emplace_back("lora.targets", lora_targets_to_string(lora.target_projections));
  out.emplace_back("lora.exclude_last", std::to_string(lora_exclude_last));
  out.emplace_back("train.preset", preset_name(train.preset));
  out.emplace_back("train.lr", r(train.lr));
  out.emplace_back("train.batch_size", std::to_string(train.batch_size));
  out.emplace_back("train.epochs", std::to_string(train.epochs));
  out.emplace_back("train.max_steps", std::to_string(train.max_steps));
  out.emplace_back("train.grad_clip", r(train.grad_clip));
  out.emplace_back("train.weight_decay", r(train.weight_decay));
  out.emplace_back("train.eval_every", std::to_string(train.eval_every));
  out.emplace_back("train.seq_len", std::to_string(train.seq_len));
  out.emplace_back("train.base_checkpoint", base_checkpoint);
  out.emplace_back("data.kind", dataset_kind_name(data.kind));
  out.emplace_back("data.path", data.path);
  out.emplace_back("data.samples", std::to_string(data.samples));
  out.emplace_back("data.digits", std::to_string(data.digits));
  out.emplace_back("data.payload_len", std::to_string(data.payload_len));
  out.emplace_back("data.seq_len", std::to_string(data.seq_len));
  out.emplace_back("data.val_fraction", r(data.val_fraction));
  out.emplace_back("data.seed", std::to_string(data.seed));
  out.emplace_back("gen.mode", gen_mode_name(gen.mode));
  out.emplace_back("gen.temperature", r(gen.temperature));
  out.emplace_back("gen.max_new_tokens", std::to_string(gen.max_new_tokens));
  out.emplace_back("gen.early_exit", b(gen.early_exit));
  out.emplace_back("gen.cache_mode", cache_mode_name(gen.cache_mode));
  out.emplace_back("gen.prompt", gen_prompt);
  out.emplace_back("gen.stop_at_eos", b(gen_stop_at_eos));
  out.emplace_back("sweep.k_max", std::to_string(sweep_k_max));
  out.emplace_back("sweep.max_steps", std::to_string(sweep_max_steps));
  out.emplace_back("analyze.metrics", analyze_metrics);
  out.emplace_back("analyze.window", std::to_string(analyze_window));
  return out;
}

}  // namespace modtune
