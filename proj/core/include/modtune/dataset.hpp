#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modtune/common.hpp"
#include "modtune/tensor.hpp"

namespace modtune {

// Byte-level vocabulary: ids 0..255 are raw byte values.
inline constexpr int32_t kBosId = 256;
inline constexpr int32_t kEosId = 257;
inline constexpr int32_t kPadId = 258;
inline constexpr int64_t kByteVocabSize = 259;

std::vector<int32_t> encode_bytes(std::string_view text);
std::string decode_bytes(std::span<const int32_t> ids);  // drops special ids

enum class DatasetKind { text_corpus, synth_copy, synth_addition };

DatasetKind dataset_kind_from_string(std::string_view s);
const char* dataset_kind_name(DatasetKind k);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synth_copy;
  std::string path;          // text_corpus source
  int64_t samples = 2048;    // synth generators
  int64_t digits = 3;        // synth_addition operand width
  int64_t payload_len = 12;  // synth_copy payload length
  int64_t seq_len = 64;      // text_corpus chunk length (tokens incl. BOS)
  double val_fraction = 0.1;
  uint64_t seed = 0;

  void validate() const;
};

// One sequence. answer_begin points at the first token of the scored span
// (the copied payload / the sum digits); generation-based eval prompts with
// tokens[0..answer_begin) and matches the rest up to EOS.
struct Example {
  std::vector<int32_t> tokens;
  int64_t answer_begin = 1;
};

struct Dataset {
  std::vector<Example> train, val;
  int64_t max_len = 0;  // longest example, in tokens
};

// Deterministic: same spec -> same examples and the same disjoint split.
Dataset build_dataset(const DatasetSpec& spec);

// Next-token batch: position c of row r predicts inputs[r, c+1]; PAD
// targets are masked out. All rows share a fixed width of seq_len inputs.
struct Batch {
  Tokens inputs;
  std::vector<int32_t> targets;  // row-major [rows x seq_len]
  std::vector<uint8_t> mask;     // 1 = position contributes to the loss
  int64_t scored_tokens = 0;
};

Batch make_batch(std::span<const Example* const> examples, int64_t seq_len);

// Epoch order is a pure function of (seed, epoch); batches cycle forever.
class Batcher {
 public:
  Batcher(const std::vector<Example>& examples, int64_t batch_size, int64_t seq_len,
          uint64_t seed);

  Batch next();
  int64_t batches_per_epoch() const;
  int64_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  const std::vector<Example>* examples_;
  int64_t batch_size_, seq_len_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  size_t cursor_ = 0;
  std::vector<size_t> order_;
};

}  // namespace modtune
