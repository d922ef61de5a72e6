#include "modtune/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace modtune {

std::vector<int32_t> encode_bytes(std::string_view text) {
  std::vector<int32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
  return out;
}

std::string decode_bytes(std::span<const int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

DatasetKind dataset_kind_from_string(std::string_view s) {
  if (s == "text_corpus") return DatasetKind::text_corpus;
  if (s == "synth_copy") return DatasetKind::synth_copy;
  if (s == "synth_addition") return DatasetKind::synth_addition;
  throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::text_corpus: return "text_corpus";
    case DatasetKind::synth_copy: return "synth_copy";
    case DatasetKind::synth_addition: return "synth_addition";
  }
  return "?";
}

void DatasetSpec::validate() const {
  if (kind == DatasetKind::text_corpus && path.empty()) {
    throw ConfigError("data.path required for text_corpus");
  }
  if (kind != DatasetKind::text_corpus && samples < 2) {
    throw ConfigError("data.samples must be >= 2");
  }
  if (kind == DatasetKind::synth_addition && (digits < 1 || digits > 9)) {
    throw ConfigError("data.digits must be in [1, 9]");
  }
  if (kind == DatasetKind::synth_copy && payload_len < 1) {
    throw ConfigError("data.payload_len must be >= 1");
  }
  if (kind == DatasetKind::text_corpus && seq_len < 2) {
    throw ConfigError("data.seq_len must be >= 2");
  }
  if (val_fraction < 0 || val_fraction >= 1) {
    throw ConfigError("data.val_fraction must be in [0, 1)");
  }
}

namespace {

Example make_copy_example(Rng& rng, int64_t payload_len) {
  // BOS payload '|' payload EOS; the echoed span is the scored answer.
  std::string payload;
  payload.reserve(static_cast<size_t>(payload_len));
  for (int64_t i = 0; i < payload_len; ++i) {
    payload.push_back(static_cast<char>('a' + rng.uniform_int(0, 26)));
  }
  Example e;
  e.tokens.push_back(kBosId);
  for (int32_t t : encode_bytes(payload)) e.tokens.push_back(t);
  e.tokens.push_back(static_cast<int32_t>('|'));
  e.answer_begin = static_cast<int64_t>(e.tokens.size());
  for (int32_t t : encode_bytes(payload)) e.tokens.push_back(t);
  e.tokens.push_back(kEosId);
  return e;
}

Example make_addition_example(Rng& rng, int64_t digits) {
  int64_t hi = 1;
  for (int64_t i = 0; i < digits; ++i) hi *= 10;
  const int64_t a = rng.uniform_int(0, hi);
  const int64_t b = rng.uniform_int(0, hi);
  const std::string prompt = std::to_string(a) + "+" + std::to_string(b) + "=";
  Example e;
  e.tokens.push_back(kBosId);
  for (int32_t t : encode_bytes(prompt)) e.tokens.push_back(t);
  e.answer_begin = static_cast<int64_t>(e.tokens.size());
  for (int32_t t : encode_bytes(std::to_string(a + b))) e.tokens.push_back(t);
  e.tokens.push_back(kEosId);
  return e;
}

std::vector<Example> corpus_examples(const DatasetSpec& spec) {
  std::ifstream in(spec.path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + spec.path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw ValidationError("corpus '" + spec.path + "' is empty");
  const int64_t chunk = spec.seq_len - 1;  // leave room for BOS
  std::vector<Example> out;
  for (size_t off = 0; off < text.size(); off += static_cast<size_t>(chunk)) {
    const size_t len = std::min(static_cast<size_t>(chunk), text.size() - off);
    if (len < 2 && !out.empty()) break;  // drop a trailing sliver
    Example e;
    e.tokens.push_back(kBosId);
    for (int32_t t : encode_bytes(std::string_view(text).substr(off, len))) {
      e.tokens.push_back(t);
    }
    e.answer_begin = 1;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

Dataset build_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Example> all;
  if (spec.kind == DatasetKind::text_corpus) {
    all = corpus_examples(spec);
  } else {
    Rng rng(derive_seed(spec.seed, "dataset-gen"));
    all.reserve(static_cast<size_t>(spec.samples));
    for (int64_t i = 0; i < spec.samples; ++i) {
      all.push_back(spec.kind == DatasetKind::synth_copy
                        ? make_copy_example(rng, spec.payload_len)
                        : make_addition_example(rng, spec.digits));
    }
  }
  if (all.size() < 2) throw ValidationError("dataset produced fewer than 2 examples");

  std::vector<size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(spec.seed, "dataset-split"));
  for (size_t i = order.size(); i > 1; --i) {  // Fisher-Yates
    std::swap(order[i - 1], order[static_cast<size_t>(split_rng.uniform_int(
                                0, static_cast<int64_t>(i)))]);
  }
  size_t n_val = static_cast<size_t>(static_cast<double>(all.size()) * spec.val_fraction);
  n_val = std::min(n_val, all.size() - 1);
  if (spec.val_fraction > 0 && n_val == 0) n_val = 1;

  Dataset ds;
  for (size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_val ? ds.val : ds.train;
    dst.push_back(std::move(all[order[i]]));
  }
  for (const auto& e : ds.train) ds.max_len = std::max(ds.max_len, (int64_t)e.tokens.size());
  for (const auto& e : ds.val) ds.max_len = std::max(ds.max_len, (int64_t)e.tokens.size());
  return ds;
}

Batch make_batch(std::span<const Example* const> examples, int64_t seq_len) {
  if (examples.empty()) throw ValidationError("make_batch: no examples");
  const int64_t rows = static_cast<int64_t>(examples.size());
  Batch b;
  b.inputs.rows = rows;
  b.inputs.cols = seq_len;
  b.inputs.ids.assign(static_cast<size_t>(rows * seq_len), kPadId);
  b.targets.assign(static_cast<size_t>(rows * seq_len), kPadId);
  b.mask.assign(static_cast<size_t>(rows * seq_len), 0);
  for (int64_t r = 0; r < rows; ++r) {
    const auto& toks = examples[static_cast<size_t>(r)]->tokens;
    const int64_t len = static_cast<int64_t>(toks.size());
    if (len > seq_len + 1) {
      throw ValidationError("make_batch: example of " + std::to_string(len) +
                            " tokens exceeds seq_len+1 = " + std::to_string(seq_len + 1));
    }
    for (int64_t c = 0; c + 1 < len; ++c) {
      b.inputs.ids[static_cast<size_t>(r * seq_len + c)] = toks[static_cast<size_t>(c)];
      b.targets[static_cast<size_t>(r * seq_len + c)] = toks[static_cast<size_t>(c + 1)];
      b.mask[static_cast<size_t>(r * seq_len + c)] = 1;
      ++b.scored_tokens;
    }
  }
  return b;
}

Batcher::Batcher(const std::vector<Example>& examples, int64_t batch_size, int64_t seq_len,
                 uint64_t seed)
    : examples_(&examples), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
  if (examples.empty()) throw ValidationError("batcher: empty example set");
  if (batch_size < 1) throw ValidationError("batcher: batch_size must be >= 1");
  order_.resize(examples.size());
  reshuffle();
}

void Batcher::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(derive_seed(derive_seed(seed_, "batch-order"), static_cast<uint64_t>(epoch_)));
  for (size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1],
              order_[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)))]);
  }
  cursor_ = 0;
}

int64_t Batcher::batches_per_epoch() const {
  const int64_t n = static_cast<int64_t>(examples_->size());
  return (n + batch_size_ - 1) / batch_size_;
}

Batch Batcher::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  std::vector<const Example*> picked;
  while (static_cast<int64_t>(picked.size()) < batch_size_ && cursor_ < order_.size()) {
    picked.push_back(&(*examples_)[order_[cursor_++]]);
  }
  return make_batch(picked, seq_len_);
}

}  // namespace modtune
