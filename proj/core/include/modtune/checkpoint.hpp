#pragma once

#include <optional>
#include <string>
#include <vector>

#include "modtune/lora.hpp"
#include "modtune/mod_head.hpp"
#include "modtune/model.hpp"

namespace modtune {

struct CheckpointMeta {
  ModelConfig model;
  std::optional<ModConfig> mod;
  std::optional<LoraConfig> lora;
};

// A model plus whatever was attached to it when it was saved.
template <typename T>
struct ModelSystem {
  TransformerModel<T> model;
  std::optional<ModHead<T>> head;
  CheckpointMeta meta;

  ModHead<T>* head_ptr() { return head ? &*head : nullptr; }
  const ModHead<T>* head_ptr() const { return head ? &*head : nullptr; }
  std::vector<NamedParam<T>> all_params();
};

// "MODCKPT1" container: u32 LE entry count, then per entry u16 name length,
// the UTF-8 name, u8 dtype code (0 = f32, 1 = f64), u8 rank, rank x u32 dims,
// row-major little-endian payload. Entries keep registry order, so a rerun
// with the same seed produces byte-identical files. The configs live in a
// JSON sidecar at <path>.json.
template <typename T>
void save_checkpoint(const std::string& path, const std::vector<NamedParam<T>>& params,
                     const CheckpointMeta& meta);

// Rebuilds the saved system (model init, adapter injection, head creation
// per the sidecar), then overwrites every parameter from the container.
// Missing/unknown names, shape or dtype mismatches raise IoError.
template <typename T>
ModelSystem<T> load_checkpoint(const std::string& path);

// Sidecar (de)serialization, shared with run-summary reporting.
std::string meta_to_json(const CheckpointMeta& meta);
CheckpointMeta meta_from_json(const std::string& text);

}  // namespace modtune
