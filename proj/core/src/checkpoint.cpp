#include "modtune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace modtune {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'O', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename P>
void write_pod(std::ofstream& out, P v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(P));
}

template <typename P>
P read_pod(std::ifstream& in, const std::string& path) {
  P v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(P));
  if (!in) throw IoError("truncated checkpoint: " + path);
  return v;
}

template <typename T>
constexpr uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

LoraTarget lora_target_from_string(const std::string& s) {
  for (const LoraTarget t : {LoraTarget::attn_q, LoraTarget::attn_k, LoraTarget::attn_v,
                             LoraTarget::attn_o, LoraTarget::mlp_in, LoraTarget::mlp_out})
    if (s == lora_target_name(t)) return t;
  throw IoError("unknown adapter target in sidecar: " + s);
}

}  // namespace

std::string meta_to_json(const CheckpointMeta& meta) {
  nlohmann::json j;
  auto& m = j["model"];
  m["vocab_size"] = meta.model.vocab_size;
  m["d_model"] = meta.model.d_model;
  m["n_layers"] = meta.model.n_layers;
  m["n_heads"] = meta.model.n_heads;
  m["d_ff"] = meta.model.d_ff;
  m["max_seq_len"] = meta.model.max_seq_len;
  m["norm_eps"] = meta.model.norm_eps;
  m["tie_embeddings"] = meta.model.tie_embeddings;
  m["seed"] = meta.model.seed;
  if (meta.mod) {
    auto& d = j["mod"];
    d["k"] = meta.mod->k;
    if (meta.mod->top_k) d["top_k"] = *meta.mod->top_k;
    d["lambda"] = meta.mod->lambda;
    d["routing_init_std"] = meta.mod->routing_init_std;
    d["use_trainable_norms"] = meta.mod->use_trainable_norms;
    d["detach_teacher"] = meta.mod->detach_teacher;
    d["epsilon_sparsity"] = meta.mod->epsilon_sparsity;
  }
  if (meta.lora) {
    auto& l = j["lora"];
    l["rank"] = meta.lora->rank;
    l["alpha"] = meta.lora->alpha;
    auto& targets = l["target_projections"] = nlohmann::json::array();
    for (const LoraTarget t : meta.lora->target_projections)
      targets.push_back(lora_target_name(t));
    auto& mask = l["layer_mask"] = nlohmann::json::array();
    for (const bool b : meta.lora->layer_mask) mask.push_back(b);
  }
  return j.dump(2);
}

CheckpointMeta meta_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint sidecar: ") + e.what());
  }
  try {
    CheckpointMeta meta;
    const auto& m = j.at("model");
    meta.model.vocab_size = m.at("vocab_size").get<int64_t>();
    meta.model.d_model = m.at("d_model").get<int64_t>();
    meta.model.n_layers = m.at("n_layers").get<int64_t>();
    meta.model.n_heads = m.at("n_heads").get<int64_t>();
    meta.model.d_ff = m.at("d_ff").get<int64_t>();
    meta.model.max_seq_len = m.at("max_seq_len").get<int64_t>();
    meta.model.norm_eps = m.at("norm_eps").get<double>();
    meta.model.tie_embeddings = m.at("tie_embeddings").get<bool>();
    meta.model.seed = m.at("seed").get<uint64_t>();
    if (j.contains("mod")) {
      const auto& d = j.at("mod");
      ModConfig mc;
      mc.k = d.at("k").get<int64_t>();
      if (d.contains("top_k")) mc.top_k = d.at("top_k").get<int64_t>();
      mc.lambda = d.at("lambda").get<double>();
      mc.routing_init_std = d.at("routing_init_std").get<double>();
      mc.use_trainable_norms = d.at("use_trainable_norms").get<bool>();
      mc.detach_teacher = d.at("detach_teacher").get<bool>();
      mc.epsilon_sparsity = d.at("epsilon_sparsity").get<double>();
      meta.mod = mc;
    }
    if (j.contains("lora")) {
      const auto& l = j.at("lora");
      LoraConfig lc;
      lc.rank = l.at("rank").get<int64_t>();
      lc.alpha = l.at("alpha").get<double>();
      lc.target_projections.clear();
      for (const auto& t : l.at("target_projections"))
        lc.target_projections.push_back(lora_target_from_string(t.get<std::string>()));
      lc.layer_mask.clear();
      for (const auto& b : l.at("layer_mask")) lc.layer_mask.push_back(b.get<bool>());
      meta.lora = lc;
    }
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint sidecar: ") + e.what());
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<NamedParam<T>>& params,
                     const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for write: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, static_cast<uint32_t>(params.size()));
  for (const auto& np : params) {
    if (np.name.size() > 0xffff) throw ValidationError("tensor name too long: " + np.name);
    write_pod(out, static_cast<uint16_t>(np.name.size()));
    out.write(np.name.data(), static_cast<std::streamsize>(np.name.size()));
    write_pod(out, dtype_code<T>());
    const auto& dims = np.tensor.dims();
    write_pod(out, static_cast<uint8_t>(dims.size()));
    for (const int64_t d : dims) write_pod(out, static_cast<uint32_t>(d));
    const auto vals = np.tensor.values();
    out.write(reinterpret_cast<const char*>(vals.data()),
              static_cast<std::streamsize>(vals.size() * sizeof(T)));
  }
  if (!out) throw IoError("write failed: " + path);
  out.close();

  std::ofstream side(path + ".json", std::ios::trunc);
  if (!side) throw IoError("cannot open for write: " + path + ".json");
  side << meta_to_json(meta) << "\n";
  if (!side) throw IoError("write failed: " + path + ".json");
}

template <typename T>
std::vector<NamedParam<T>> ModelSystem<T>::all_params() {
  std::vector<NamedParam<T>> all = model.named_params();
  if (head) {
    auto hp = head->named_params();
    all.insert(all.end(), hp.begin(), hp.end());
  }
  return all;
}

template <typename T>
ModelSystem<T> load_checkpoint(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw IoError("cannot open checkpoint sidecar: " + path + ".json");
  std::string text((std::istreambuf_iterator<char>(side)), std::istreambuf_iterator<char>());

  ModelSystem<T> sys;
  sys.meta = meta_from_json(text);
  sys.meta.model.validate();
  sys.model = init_model<T>(sys.meta.model);
  if (sys.meta.lora) {
    sys.meta.lora->validate(sys.meta.model);
    inject(sys.model, *sys.meta.lora, sys.meta.model.seed);
  }
  if (sys.meta.mod) {
    sys.meta.mod->validate(sys.meta.model);
    sys.head = init_head(sys.model, *sys.meta.mod, sys.meta.model.seed);
  }

  std::unordered_map<std::string, Tensor<T>> by_name;
  for (auto& np : sys.all_params()) by_name.emplace(np.name, np.tensor);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  const uint32_t count = read_pod<uint32_t>(in, path);
  std::unordered_set<std::string> seen;
  for (uint32_t e = 0; e < count; ++e) {
    const uint16_t name_len = read_pod<uint16_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw IoError("truncated checkpoint: " + path);
    const uint8_t dtype = read_pod<uint8_t>(in, path);
    if (dtype != dtype_code<T>())
      throw IoError("dtype mismatch for " + name + " in " + path + ": code " +
                    std::to_string(dtype) + ", expected " + std::to_string(dtype_code<T>()));
    const uint8_t rank = read_pod<uint8_t>(in, path);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = read_pod<uint32_t>(in, path);

    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("unknown tensor in checkpoint: " + name);
    if (it->second.dims() != dims)
      throw IoError("shape mismatch for " + name + ": file " + dims_to_string(dims) +
                    ", model " + dims_to_string(it->second.dims()));
    std::span<T> dst = it->second.values();
    in.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size() * sizeof(T)));
    if (!in) throw IoError("truncated checkpoint: " + path);
    if (!seen.insert(name).second) throw IoError("duplicate tensor in checkpoint: " + name);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw IoError("trailing bytes in checkpoint: " + path);
  if (seen.size() != by_name.size())
    throw IoError("checkpoint is missing tensors: has " + std::to_string(seen.size()) +
                  ", model needs " + std::to_string(by_name.size()));
  return sys;
}

#define MODTUNE_INSTANTIATE_CHECKPOINT(T)                                                        \
  template void save_checkpoint<T>(const std::string&, const std::vector<NamedParam<T>>&,        \
                                   const CheckpointMeta&);                                       \
  template ModelSystem<T> load_checkpoint<T>(const std::string&);                                \
  template std::vector<NamedParam<T>> ModelSystem<T>::all_params();

MODTUNE_INSTANTIATE_CHECKPOINT(float)
MODTUNE_INSTANTIATE_CHECKPOINT(double)

#undef MODTUNE_INSTANTIATE_CHECKPOINT

}  // namespace modtune
