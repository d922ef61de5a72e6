#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "modtune/common.hpp"

namespace modtune {

// Dense row-major tensor with an optional same-shape gradient buffer.
//
// Tensor is a value-semantic handle onto shared storage: copies alias the
// same data, like the usual deep-learning tensor types. The element type is
// a template parameter; the whole library is instantiated for float (the
// training default) and double (gradient checking, bitwise-trajectory tests).
//
// Finite-ness policy: ops with a genuine non-finite failure mode (exp, log,
// softmax, losses) validate eagerly; the optimizer and trainer validate
// losses and gradients every step, so a NaN/Inf can never reach a parameter
// update silently.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> dims);
  static Tensor full(std::vector<int64_t> dims, T value);
  static Tensor scalar(T value);  // rank 0, numel 1
  static Tensor from_data(std::vector<int64_t> dims, std::vector<T> values);
  static Tensor randn(std::vector<int64_t> dims, Rng& rng, double stddev);

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<int64_t>& dims() const;
  size_t rank() const { return dims().size(); }
  int64_t dim(size_t i) const;
  int64_t numel() const;

  std::span<T> values();
  std::span<const T> values() const;

  // Gradient buffer access. ensure_grad() allocates (zero-filled) on demand;
  // grad() on an unallocated buffer is a StateError.
  std::span<T> grad();
  std::span<const T> grad() const;
  bool grad_allocated() const;
  void ensure_grad();
  void zero_grad();

  // True when this tensor participates in gradient computation, either as a
  // trainable leaf or as an intermediate produced from one.
  bool needs_grad() const;
  void set_requires_grad(bool b);

  T item() const;  // numel-1 tensors only
  T at(std::initializer_list<int64_t> idx) const;

  Tensor clone() const;   // deep copy of values; no grad, no graph
  Tensor detach() const;  // alias for clone(), named for intent at call sites

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

 private:
  struct Storage {
    std::vector<int64_t> dims;
    std::vector<T> values;
    std::vector<T> grad;  // empty until ensure_grad()
    bool needs_grad = false;
  };

  std::shared_ptr<Storage> s_;

  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}
  Storage& st();
  const Storage& st() const;
};

// Integer token matrix (batch x seq), kept separate from Tensor because token
// ids are never differentiated.
struct Tokens {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int32_t> ids;

  int32_t at(int64_t r, int64_t c) const { return ids[static_cast<size_t>(r * cols + c)]; }
  int64_t numel() const { return rows * cols; }
};

// Reverse-mode tape. Construction pushes the tape as the active one for the
// current thread; ops record backward closures onto the active tape whenever
// an input needs gradients. backward() zeroes the grads of every touched
// tensor first, so re-running it on the same tape is idempotent.
//
// A tape and the tensors recorded on it are confined to one thread; there is
// no cross-thread synchronization by design.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept;

  // touched: every tensor whose grad buffer the closure may read or write.
  void record(std::vector<Tensor<T>> touched, std::function<void()> backward_step);

  // Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse order.
  // loss must be a scalar produced while this tape was active.
  void backward(const Tensor<T>& loss);

  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<Tensor<T>> touched_;
  Tape* prev_ = nullptr;
};

int64_t checked_numel(const std::vector<int64_t>& dims);
std::string dims_to_string(const std::vector<int64_t>& dims);

}  // namespace modtune
