#include "modtune/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace modtune {

int64_t checked_numel(const std::vector<int64_t>& dims) {
  int64_t n = 1;
  for (int64_t d : dims) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims));
    if (n > (int64_t(1) << 40) / d) throw ShapeError("tensor too large: " + dims_to_string(dims));
    n *= d;
  }
  return n;
}

std::string dims_to_string(const std::vector<int64_t>& dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) os << "x";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

template <typename T>
typename Tensor<T>::Storage& Tensor<T>::st() {
  if (!s_) throw StateError("use of undefined tensor");
  return *s_;
}

template <typename T>
const typename Tensor<T>::Storage& Tensor<T>::st() const {
  if (!s_) throw StateError("use of undefined tensor");
  return *s_;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int64_t> dims) {
  auto s = std::make_shared<Storage>();
  int64_t n = checked_numel(dims);
  s->dims = std::move(dims);
  s->values.assign(static_cast<size_t>(n), T(0));
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int64_t> dims, T value) {
  Tensor t = zeros(std::move(dims));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  auto s = std::make_shared<Storage>();
  s->values.assign(1, value);
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(std::vector<int64_t> dims, std::vector<T> values) {
  int64_t n = checked_numel(dims);
  if (static_cast<int64_t>(values.size()) != n) {
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                     dims_to_string(dims));
  }
  auto s = std::make_shared<Storage>();
  s->dims = std::move(dims);
  s->values = std::move(values);
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::randn(std::vector<int64_t> dims, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(dims));
  for (T& v : t.values()) v = static_cast<T>(rng.gaussian(stddev));
  return t;
}

template <typename T>
const std::vector<int64_t>& Tensor<T>::dims() const {
  return st().dims;
}

template <typename T>
int64_t Tensor<T>::dim(size_t i) const {
  const auto& d = dims();
  if (i >= d.size()) throw ShapeError("dim index out of range");
  return d[i];
}

template <typename T>
int64_t Tensor<T>::numel() const {
  return static_cast<int64_t>(st().values.size());
}

template <typename T>
std::span<T> Tensor<T>::values() {
  return std::span<T>(st().values);
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return std::span<const T>(st().values);
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (!grad_allocated()) throw StateError("grad accessed before ensure_grad()");
  return std::span<T>(st().grad);
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!grad_allocated()) throw StateError("grad accessed before ensure_grad()");
  return std::span<const T>(st().grad);
}

template <typename T>
bool Tensor<T>::grad_allocated() const {
  return s_ && !s_->grad.empty();
}

template <typename T>
void Tensor<T>::ensure_grad() {
  auto& s = st();
  if (s.grad.empty()) s.grad.assign(s.values.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& s = st();
  if (!s.grad.empty()) std::fill(s.grad.begin(), s.grad.end(), T(0));
}

template <typename T>
bool Tensor<T>::needs_grad() const {
  return s_ && s_->needs_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool b) {
  st().needs_grad = b;
  if (b) ensure_grad();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + dims_to_string(dims()));
  return st().values[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> idx) const {
  const auto& d = dims();
  if (idx.size() != d.size()) throw ShapeError("at(): rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t ix : idx) {
    if (ix < 0 || ix >= d[i]) throw IndexError("at(): index out of range");
    flat = flat * d[i] + ix;
    ++i;
  }
  return st().values[static_cast<size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto s = std::make_shared<Storage>();
  s->dims = st().dims;
  s->values = st().values;
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return clone();
}

// ---------------------------------------------------------------------------
// Tape

namespace {
template <typename T>
thread_local Tape<T>* t_active_tape = nullptr;
}

template <typename T>
Tape<T>::Tape() {
  prev_ = t_active_tape<T>;
  t_active_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
  t_active_tape<T> = prev_;
}

template <typename T>
Tape<T>* Tape<T>::current() noexcept {
  return t_active_tape<T>;
}

template <typename T>
void Tape<T>::record(std::vector<Tensor<T>> touched, std::function<void()> backward_step) {
  for (auto& t : touched) touched_.push_back(std::move(t));
  nodes_.push_back(std::move(backward_step));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() expects a scalar loss");
  }
  // Reset first: makes repeated backward() calls on the same tape idempotent.
  for (auto& t : touched_) {
    if (t.needs_grad()) {
      t.ensure_grad();
      t.zero_grad();
    }
  }
  Tensor<T> l = loss;
  l.ensure_grad();
  l.zero_grad();
  l.grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace modtune
