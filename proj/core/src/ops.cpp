#include "modtune/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace modtune::ops {

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::current()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->defined() && t->needs_grad()) return true;
  }
  return false;
}

template <typename T>
void mark_output(Tensor<T>& out) {
  out.set_requires_grad(true);
}

template <typename T>
int64_t last_dim(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("op requires rank >= 1, got scalar");
  return x.dims().back();
}

template <typename T>
void check_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + dims_to_string(a.dims()) +
                     " vs " + dims_to_string(b.dims()));
  }
}

template <typename T>
constexpr T kNegInf = -std::numeric_limits<T>::infinity();

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_dims(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.dims());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (recording<T>({&a, &b})) {
    mark_output(out);
    Tape<T>::current()->record({a, b, out}, [a = a, b = b, out]() mutable {
      auto go = out.grad();
      if (a.needs_grad()) {
        auto ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.needs_grad()) {
        auto gb = b.grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const int64_t d = last_dim(x);
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("add_bias: bias " + dims_to_string(bias.dims()) + " vs last dim " +
                     std::to_string(d));
  }
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.dims());
  auto xv = x.values();
  auto bv = bias.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T* orow = ov.data() + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = xr[j] + bv[j];
  }
  if (recording<T>({&x, &bias})) {
    mark_output(out);
    Tape<T>::current()->record({x, bias, out}, [x = x, bias = bias, out, rows, d]() mutable {
      auto go = out.grad();
      if (x.needs_grad()) {
        auto gx = x.grad();
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (bias.needs_grad()) {
        auto gb = bias.grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = go.data() + r * d;
          for (int64_t j = 0; j < d; ++j) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_dims(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.dims());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (recording<T>({&a, &b})) {
    mark_output(out);
    Tape<T>::current()->record({a, b, out}, [a = a, b = b, out]() mutable {
      auto go = out.grad();
      if (a.needs_grad()) {
        auto ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.needs_grad()) {
        auto gb = b.grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_dims(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.dims());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (recording<T>({&a, &b})) {
    mark_output(out);
    Tape<T>::current()->record({a, b, out}, [a = a, b = b, out]() mutable {
      auto go = out.grad();
      auto av2 = a.values();
      auto bv2 = b.values();
      if (a.needs_grad()) {
        auto ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
      }
      if (b.needs_grad()) {
        auto gb = b.grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av2[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.dims());
  auto av = a.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (recording<T>({&a})) {
    mark_output(out);
    Tape<T>::current()->record({a, out}, [a = a, out, c]() mutable {
      auto go = out.grad();
      if (a.needs_grad()) {
        auto ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& w) {
  const int64_t p = last_dim(a);
  if (w.rank() != 2 || w.dim(0) != p) {
    throw ShapeError("matmul: " + dims_to_string(a.dims()) + " x " + dims_to_string(w.dims()));
  }
  const int64_t q = w.dim(1);
  const int64_t m = a.numel() / p;
  std::vector<int64_t> out_dims = a.dims();
  out_dims.back() = q;
  Tensor<T> out = Tensor<T>::zeros(std::move(out_dims));
  {
    CMatMap<T> A(a.values().data(), m, p);
    CMatMap<T> W(w.values().data(), p, q);
    MatMap<T> C(out.values().data(), m, q);
    C.noalias() = A * W;
  }
  if (recording<T>({&a, &w})) {
    mark_output(out);
    Tape<T>::current()->record({a, w, out}, [a = a, w = w, out, m, p, q]() mutable {
      CMatMap<T> GC(out.grad().data(), m, q);
      if (a.needs_grad()) {
        CMatMap<T> W(w.values().data(), p, q);
        MatMap<T> GA(a.grad().data(), m, p);
        GA.noalias() += GC * W.transpose();
      }
      if (w.needs_grad()) {
        CMatMap<T> A(a.values().data(), m, p);
        MatMap<T> GW(w.grad().data(), p, q);
        GW.noalias() += A.transpose() * GC;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul_t(const Tensor<T>& a, const Tensor<T>& w) {
  const int64_t p = last_dim(a);
  if (w.rank() != 2 || w.dim(1) != p) {
    throw ShapeError("matmul_t: " + dims_to_string(a.dims()) + " x " + dims_to_string(w.dims()) +
                     "^T");
  }
  const int64_t q = w.dim(0);
  const int64_t m = a.numel() / p;
  std::vector<int64_t> out_dims = a.dims();
  out_dims.back() = q;
  Tensor<T> out = Tensor<T>::zeros(std::move(out_dims));
  {
    CMatMap<T> A(a.values().data(), m, p);
    CMatMap<T> W(w.values().data(), q, p);
    MatMap<T> C(out.values().data(), m, q);
    C.noalias() = A * W.transpose();
  }
  if (recording<T>({&a, &w})) {
    mark_output(out);
    Tape<T>::current()->record({a, w, out}, [a = a, w = w, out, m, p, q]() mutable {
      CMatMap<T> GC(out.grad().data(), m, q);
      if (a.needs_grad()) {
        CMatMap<T> W(w.values().data(), q, p);
        MatMap<T> GA(a.grad().data(), m, p);
        GA.noalias() += GC * W;
      }
      if (w.needs_grad()) {
        CMatMap<T> A(a.values().data(), m, p);
        MatMap<T> GW(w.grad().data(), q, p);
        GW.noalias() += GC.transpose() * A;
      }
    });
  }
  return out;
}

namespace {

template <typename T>
void bmm_check(const Tensor<T>& a, const Tensor<T>& b, bool trans_b, int64_t& batches, int64_t& m,
               int64_t& p, int64_t& q) {
  if (a.rank() < 2 || b.rank() != a.rank()) throw ShapeError("bmm: rank mismatch");
  for (size_t i = 0; i + 2 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) throw ShapeError("bmm: leading dims differ");
  }
  m = a.dim(a.rank() - 2);
  p = a.dim(a.rank() - 1);
  const int64_t bp = trans_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  q = trans_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (bp != p) {
    throw ShapeError("bmm: inner dims " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  }
  batches = a.numel() / (m * p);
}

// Shared core for bmm / bmm_t; trans_b selects B or B^T.
template <typename T>
Tensor<T> bmm_impl(const Tensor<T>& a, const Tensor<T>& b, bool trans_b) {
  int64_t batches, m, p, q;
  bmm_check(a, b, trans_b, batches, m, p, q);
  std::vector<int64_t> out_dims = a.dims();
  out_dims[out_dims.size() - 1] = q;
  Tensor<T> out = Tensor<T>::zeros(std::move(out_dims));
  const int64_t a_str = m * p, b_str = p * q, c_str = m * q;
  for (int64_t n = 0; n < batches; ++n) {
    CMatMap<T> A(a.values().data() + n * a_str, m, p);
    MatMap<T> C(out.values().data() + n * c_str, m, q);
    if (trans_b) {
      CMatMap<T> B(b.values().data() + n * b_str, q, p);
      C.noalias() = A * B.transpose();
    } else {
      CMatMap<T> B(b.values().data() + n * b_str, p, q);
      C.noalias() = A * B;
    }
  }
  if (recording<T>({&a, &b})) {
    mark_output(out);
    Tape<T>::current()->record(
        {a, b, out}, [a = a, b = b, out, batches, m, p, q, a_str, b_str, c_str, trans_b]() mutable {
          for (int64_t n = 0; n < batches; ++n) {
            CMatMap<T> GC(out.grad().data() + n * c_str, m, q);
            if (a.needs_grad()) {
              MatMap<T> GA(a.grad().data() + n * a_str, m, p);
              if (trans_b) {
                CMatMap<T> B(b.values().data() + n * b_str, q, p);
                GA.noalias() += GC * B;
              } else {
                CMatMap<T> B(b.values().data() + n * b_str, p, q);
                GA.noalias() += GC * B.transpose();
              }
            }
            if (b.needs_grad()) {
              CMatMap<T> A(a.values().data() + n * a_str, m, p);
              if (trans_b) {
                MatMap<T> GB(b.grad().data() + n * b_str, q, p);
                GB.noalias() += GC.transpose() * A;
              } else {
                MatMap<T> GB(b.grad().data() + n * b_str, p, q);
                GB.noalias() += A.transpose() * GC;
              }
            }
          }
        });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  return bmm_impl(a, b, false);
}

template <typename T>
Tensor<T> bmm_t(const Tensor<T>& a, const Tensor<T>& b) {
  return bmm_impl(a, b, true);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: rank-2 only");
  return permute(x, {1, 0});
}

namespace {

template <typename T>
void permute_copy(std::span<const T> src, std::span<T> dst, const std::vector<int64_t>& in_dims,
                  const std::vector<int>& perm, bool accumulate) {
  const size_t r = in_dims.size();
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_dims[i];
  std::vector<int64_t> out_dims(r);
  for (size_t i = 0; i < r; ++i) out_dims[i] = in_dims[perm[i]];
  std::vector<int64_t> idx(r, 0);
  const int64_t n = static_cast<int64_t>(src.size());
  for (int64_t o = 0; o < n; ++o) {
    int64_t in_flat = 0;
    for (size_t i = 0; i < r; ++i) in_flat += idx[i] * in_strides[perm[i]];
    if (accumulate) {
      dst[in_flat] += src[o];
    } else {
      dst[o] = src[in_flat];
    }
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < out_dims[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: perm size != rank");
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || static_cast<size_t>(p) >= r || seen[p]) throw ShapeError("permute: bad perm");
    seen[p] = true;
  }
  std::vector<int64_t> out_dims(r);
  for (size_t i = 0; i < r; ++i) out_dims[i] = x.dim(perm[i]);
  Tensor<T> out = Tensor<T>::zeros(out_dims);
  permute_copy<T>(x.values(), out.values(), x.dims(), perm, false);
  if (recording<T>({&x})) {
    mark_output(out);
    std::vector<int64_t> in_dims = x.dims();
    Tape<T>::current()->record({x, out}, [x = x, out, in_dims, perm]() mutable {
      if (!x.needs_grad()) return;
      // dst is the input grad here: scatter out.grad back through the
      // same index map, accumulating.
      permute_copy<T>(out.grad(), x.grad(), in_dims, perm, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> new_dims) {
  if (checked_numel(new_dims) != x.numel()) {
    throw ShapeError("reshape: numel mismatch " + dims_to_string(x.dims()) + " -> " +
                     dims_to_string(new_dims));
  }
  Tensor<T> out = Tensor<T>::zeros(std::move(new_dims));
  std::copy(x.values().begin(), x.values().end(), out.values().begin());
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out]() mutable {
      if (!x.needs_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const size_t r = parts[0].rank();
  if (axis < 0 || static_cast<size_t>(axis) >= r) throw ShapeError("concat: bad axis");
  std::vector<int64_t> out_dims = parts[0].dims();
  for (size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].rank() != r) throw ShapeError("concat: rank mismatch");
    for (size_t ax = 0; ax < r; ++ax) {
      if (ax == static_cast<size_t>(axis)) continue;
      if (parts[i].dim(ax) != out_dims[ax]) throw ShapeError("concat: dim mismatch");
    }
    out_dims[axis] += parts[i].dim(axis);
  }
  int64_t inner = 1;
  for (size_t ax = axis + 1; ax < r; ++ax) inner *= out_dims[ax];
  int64_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= out_dims[ax];

  Tensor<T> out = Tensor<T>::zeros(out_dims);
  auto ov = out.values();
  const int64_t out_row = out_dims[axis] * inner;
  int64_t offset = 0;
  for (const auto& part : parts) {
    const int64_t chunk = part.dim(axis) * inner;
    auto pv = part.values();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * chunk, pv.data() + (o + 1) * chunk,
                ov.data() + o * out_row + offset);
    }
    offset += chunk;
  }
  bool any_grad = false;
  for (const auto& part : parts) any_grad |= part.needs_grad();
  if (Tape<T>::current() && any_grad) {
    mark_output(out);
    std::vector<Tensor<T>> touched = parts;
    touched.push_back(out);
    std::vector<Tensor<T>> ins = parts;
    Tape<T>::current()->record(std::move(touched), [ins, out, outer, out_row]() mutable {
      auto go = out.grad();
      int64_t off = 0;
      for (auto& part : ins) {
        const int64_t part_chunk = part.numel() / outer;
        if (part.needs_grad()) {
          auto gp = part.grad();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = go.data() + o * out_row + off;
            T* dst = gp.data() + o * part_chunk;
            for (int64_t i = 0; i < part_chunk; ++i) dst[i] += src[i];
          }
        }
        off += part_chunk;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.dims());
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    ov[i] = std::exp(xv[i]);
    if (!std::isfinite(ov[i])) throw NumericError("exp overflow/NaN at flat index " + std::to_string(i));
  }
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out]() mutable {
      if (!x.needs_grad()) return;
      auto go = out.grad();
      auto ov2 = out.values();
      auto gx = x.grad();
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * ov2[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.dims());
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    if (!(xv[i] > T(0))) throw NumericError("log of non-positive value");
    ov[i] = std::log(xv[i]);
  }
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out]() mutable {
      if (!x.needs_grad()) return;
      auto go = out.grad();
      auto xv2 = x.values();
      auto gx = x.grad();
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] / xv2[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028653558798921198687);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  Tensor<T> out = Tensor<T>::zeros(x.dims());
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    const T v = xv[i];
    ov[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out]() mutable {
      if (!x.needs_grad()) return;
      constexpr T kC = T(0.7978845608028653558798921198687);
      constexpr T kA = T(0.044715);
      auto go = out.grad();
      auto xv2 = x.values();
      auto gx = x.grad();
      for (size_t i = 0; i < go.size(); ++i) {
        const T v = xv2[i];
        const T u = kC * (v + kA * v * v * v);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * v * v);
        gx[i] += go[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const int64_t d = last_dim(x);
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.dims());
  auto xv = x.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T* orow = ov.data() + r * d;
    T mx = kNegInf<T>;
    for (int64_t j = 0; j < d; ++j) {
      if (std::isnan(xr[j])) throw NumericError("softmax: NaN input");
      if (xr[j] > mx) mx = xr[j];
    }
    if (mx == std::numeric_limits<T>::infinity()) throw NumericError("softmax: +inf input");
    if (mx == kNegInf<T>) throw NumericError("softmax: all inputs are -inf");
    T sum = T(0);
    for (int64_t j = 0; j < d; ++j) {
      orow[j] = std::exp(xr[j] - mx);  // exp(-inf) == 0 exactly
      sum += orow[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out, rows, d]() mutable {
      if (!x.needs_grad()) return;
      auto go = out.grad();
      auto ov2 = out.values();
      auto gx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* y = ov2.data() + r * d;
        const T* g = go.data() + r * d;
        T* gxr = gx.data() + r * d;
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += y[j] * g[j];
        for (int64_t j = 0; j < d; ++j) gxr[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> apply_causal_mask(const Tensor<T>& scores) {
  if (scores.rank() < 2) throw ShapeError("apply_causal_mask: rank >= 2 required");
  const int64_t s2 = scores.dim(scores.rank() - 1);
  const int64_t s1 = scores.dim(scores.rank() - 2);
  if (s1 != s2) throw ShapeError("apply_causal_mask: last two dims must be equal");
  const int64_t mats = scores.numel() / (s1 * s2);
  Tensor<T> out = Tensor<T>::zeros(scores.dims());
  auto xv = scores.values();
  auto ov = out.values();
  for (int64_t n = 0; n < mats; ++n) {
    const T* src = xv.data() + n * s1 * s2;
    T* dst = ov.data() + n * s1 * s2;
    for (int64_t i = 0; i < s1; ++i) {
      for (int64_t j = 0; j <= i; ++j) dst[i * s2 + j] = src[i * s2 + j];
      for (int64_t j = i + 1; j < s2; ++j) dst[i * s2 + j] = kNegInf<T>;
    }
  }
  if (recording<T>({&scores})) {
    mark_output(out);
    Tape<T>::current()->record({scores, out}, [scores = scores, out, mats, s1, s2]() mutable {
      if (!scores.needs_grad()) return;
      auto go = out.grad();
      auto gx = scores.grad();
      for (int64_t n = 0; n < mats; ++n) {
        const T* g = go.data() + n * s1 * s2;
        T* gs = gx.data() + n * s1 * s2;
        for (int64_t i = 0; i < s1; ++i) {
          for (int64_t j = 0; j <= i; ++j) gs[i * s2 + j] += g[i * s2 + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int64_t d = last_dim(x);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw ShapeError("layer_norm: gamma/beta must be [d]");
  }
  if (!(eps > T(0))) throw ValidationError("layer_norm: eps must be > 0");
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.dims());
  // xhat is kept for backward; stored densely alongside the output.
  Tensor<T> xhat = Tensor<T>::zeros(x.dims());
  Tensor<T> inv_std = Tensor<T>::zeros({rows});
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto ov = out.values();
  auto hv = xhat.values();
  auto sv = inv_std.values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= T(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      const T c = xr[j] - mu;
      var += c * c;
    }
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    sv[r] = is;
    T* hr = hv.data() + r * d;
    T* orow = ov.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * is;
      orow[j] = gv[j] * hr[j] + bv[j];
    }
  }
  if (recording<T>({&x, &gamma, &beta})) {
    mark_output(out);
    Tape<T>::current()->record(
        {x, gamma, beta, out}, [x = x, gamma = gamma, beta = beta, out, xhat, inv_std, rows, d]() mutable {
          auto go = out.grad();
          auto hv2 = xhat.values();
          auto sv2 = inv_std.values();
          auto gv2 = gamma.values();
          if (gamma.needs_grad() || beta.needs_grad()) {
            for (int64_t r = 0; r < rows; ++r) {
              const T* g = go.data() + r * d;
              const T* h = hv2.data() + r * d;
              if (gamma.needs_grad()) {
                auto gg = gamma.grad();
                for (int64_t j = 0; j < d; ++j) gg[j] += g[j] * h[j];
              }
              if (beta.needs_grad()) {
                auto gb = beta.grad();
                for (int64_t j = 0; j < d; ++j) gb[j] += g[j];
              }
            }
          }
          if (x.needs_grad()) {
            auto gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
              const T* g = go.data() + r * d;
              const T* h = hv2.data() + r * d;
              T* gxr = gx.data() + r * d;
              T mean_dh = T(0), mean_dh_h = T(0);
              for (int64_t j = 0; j < d; ++j) {
                const T dh = g[j] * gv2[j];
                mean_dh += dh;
                mean_dh_h += dh * h[j];
              }
              mean_dh /= T(d);
              mean_dh_h /= T(d);
              for (int64_t j = 0; j < d; ++j) {
                const T dh = g[j] * gv2[j];
                gxr[j] += sv2[r] * (dh - mean_dh - h[j] * mean_dh_h);
              }
            }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>* row_mask) {
  const int64_t v = last_dim(logits);
  const int64_t rows = logits.numel() / v;
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  if (row_mask && static_cast<int64_t>(row_mask->size()) != rows) {
    throw ShapeError("cross_entropy: mask size mismatch");
  }
  int64_t active = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!row_mask || (*row_mask)[r]) {
      ++active;
      if (targets[r] < 0 || targets[r] >= v) {
        throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                         " out of range [0, " + std::to_string(v) + ")");
      }
    }
  }
  if (active == 0) throw ValidationError("cross_entropy: every position is masked");

  auto xv = logits.values();
  // Per-row log-sum-exp, cached for backward.
  std::vector<T> lse(static_cast<size_t>(rows), T(0));
  T total = T(0);
  for (int64_t r = 0; r < rows; ++r) {
    if (row_mask && !(*row_mask)[r]) continue;
    const T* z = xv.data() + r * v;
    T mx = kNegInf<T>;
    for (int64_t j = 0; j < v; ++j) {
      if (std::isnan(z[j])) throw NumericError("cross_entropy: NaN logit");
      if (z[j] > mx) mx = z[j];
    }
    if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite logits");
    T s = T(0);
    for (int64_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
    lse[r] = mx + std::log(s);
    total += lse[r] - z[targets[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(active));
  if (recording<T>({&logits})) {
    mark_output(out);
    std::vector<uint8_t> mask_copy = row_mask ? *row_mask : std::vector<uint8_t>();
    std::vector<int32_t> tgt_copy = targets;
    Tape<T>::current()->record(
        {logits, out}, [logits = logits, out, lse, mask_copy, tgt_copy, rows, v, active]() mutable {
          if (!logits.needs_grad()) return;
          const T g = out.grad()[0] / T(active);
          auto xv2 = logits.values();
          auto gx = logits.grad();
          for (int64_t r = 0; r < rows; ++r) {
            if (!mask_copy.empty() && !mask_copy[r]) continue;
            const T* z = xv2.data() + r * v;
            T* gr = gx.data() + r * v;
            for (int64_t j = 0; j < v; ++j) {
              T p = std::exp(z[j] - lse[r]);
              gr[j] += g * (p - (j == tgt_copy[r] ? T(1) : T(0)));
            }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> kl_div(const Tensor<T>& p, const Tensor<T>& q, const std::vector<uint8_t>* row_mask) {
  check_same_dims(p, q, "kl_div");
  const int64_t v = last_dim(p);
  const int64_t rows = p.numel() / v;
  if (row_mask && static_cast<int64_t>(row_mask->size()) != rows) {
    throw ShapeError("kl_div: mask size mismatch");
  }
  constexpr T kQFloor = T(1e-12);
  constexpr T kRowTol = T(1e-5);
  auto pv = p.values();
  auto qv = q.values();
  int64_t active = 0;
  T total = T(0);
  for (int64_t r = 0; r < rows; ++r) {
    if (row_mask && !(*row_mask)[r]) continue;
    ++active;
    const T* pr = pv.data() + r * v;
    const T* qr = qv.data() + r * v;
    T ps = T(0), qs = T(0);
    for (int64_t j = 0; j < v; ++j) {
      if (pr[j] < T(0) || qr[j] < T(0) || !std::isfinite(pr[j]) || !std::isfinite(qr[j])) {
        throw ValidationError("kl_div: rows must be non-negative and finite");
      }
      ps += pr[j];
      qs += qr[j];
    }
    if (std::abs(ps - T(1)) > kRowTol || std::abs(qs - T(1)) > kRowTol) {
      throw ValidationError("kl_div: rows must sum to 1 (row " + std::to_string(r) + ")");
    }
    T row_kl = T(0);
    for (int64_t j = 0; j < v; ++j) {
      if (pr[j] > T(0)) {
        const T qf = std::max(qr[j], kQFloor);
        row_kl += pr[j] * (std::log(pr[j]) - std::log(qf));
      }
    }
    total += row_kl;
  }
  if (active == 0) throw ValidationError("kl_div: every row is masked");
  Tensor<T> out = Tensor<T>::scalar(total / T(active));
  if (recording<T>({&p, &q})) {
    mark_output(out);
    std::vector<uint8_t> mask_copy = row_mask ? *row_mask : std::vector<uint8_t>();
    Tape<T>::current()->record({p, q, out}, [p = p, q = q, out, mask_copy, rows, v, active]() mutable {
      constexpr T kQFloor = T(1e-12);
      const T g = out.grad()[0] / T(active);
      auto pv2 = p.values();
      auto qv2 = q.values();
      for (int64_t r = 0; r < rows; ++r) {
        if (!mask_copy.empty() && !mask_copy[r]) continue;
        const T* pr = pv2.data() + r * v;
        const T* qr = qv2.data() + r * v;
        if (p.needs_grad()) {
          auto gp = p.grad();
          T* gpr = gp.data() + r * v;
          for (int64_t j = 0; j < v; ++j) {
            if (pr[j] > T(0)) {
              const T qf = std::max(qr[j], kQFloor);
              gpr[j] += g * (std::log(pr[j]) - std::log(qf) + T(1));
            }
          }
        }
        if (q.needs_grad()) {
          auto gq = q.grad();
          T* gqr = gq.data() + r * v;
          for (int64_t j = 0; j < v; ++j) {
            if (pr[j] > T(0) && qr[j] > kQFloor) gqr[j] -= g * pr[j] / qr[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out]() mutable {
      if (!x.needs_grad()) return;
      const T g = out.grad()[0];
      auto gx = x.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const int64_t n = x.numel();
  T total = T(0);
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  if (recording<T>({&x})) {
    mark_output(out);
    Tape<T>::current()->record({x, out}, [x = x, out, n]() mutable {
      if (!x.needs_grad()) return;
      const T g = out.grad()[0] / T(n);
      auto gx = x.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const Tokens& tokens) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V x d]");
  const int64_t v = table.dim(0);
  const int64_t d = table.dim(1);
  for (int32_t id : tokens.ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding: token id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({tokens.rows, tokens.cols, d});
  auto tv = table.values();
  auto ov = out.values();
  for (int64_t i = 0; i < tokens.numel(); ++i) {
    const T* src = tv.data() + static_cast<int64_t>(tokens.ids[i]) * d;
    std::copy(src, src + d, ov.data() + i * d);
  }
  if (recording<T>({&table})) {
    mark_output(out);
    std::vector<int32_t> ids = tokens.ids;
    Tape<T>::current()->record({table, out}, [table = table, out, ids, d]() mutable {
      if (!table.needs_grad()) return;
      auto go = out.grad();
      auto gt = table.grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* g = go.data() + static_cast<int64_t>(i) * d;
        T* dst = gt.data() + static_cast<int64_t>(ids[i]) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> ensemble_mix(const std::vector<Tensor<T>>& route_logits, const Tensor<T>& weights) {
  const size_t k = route_logits.size();
  if (k == 0) throw ShapeError("ensemble_mix: no routes");
  if (weights.rank() < 1 || weights.dims().back() != static_cast<int64_t>(k)) {
    throw ShapeError("ensemble_mix: weights last dim must equal route count");
  }
  const auto& ldims = route_logits[0].dims();
  for (const auto& l : route_logits) {
    if (l.dims() != ldims) throw ShapeError("ensemble_mix: route logits shape mismatch");
  }
  const int64_t v = ldims.back();
  const int64_t rows = route_logits[0].numel() / v;
  if (weights.numel() != rows * static_cast<int64_t>(k)) {
    throw ShapeError("ensemble_mix: weights/logits row mismatch");
  }
  Tensor<T> out = Tensor<T>::zeros(ldims);
  auto wv = weights.values();
  auto ov = out.values();
  for (size_t i = 0; i < k; ++i) {
    auto lv = route_logits[i].values();
    for (int64_t r = 0; r < rows; ++r) {
      const T w = wv[r * k + i];
      const T* src = lv.data() + r * v;
      T* dst = ov.data() + r * v;
      if (i == 0) {
        for (int64_t j = 0; j < v; ++j) dst[j] = w * src[j];
      } else {
        for (int64_t j = 0; j < v; ++j) dst[j] += w * src[j];
      }
    }
  }
  bool any = weights.needs_grad();
  for (const auto& l : route_logits) any |= l.needs_grad();
  if (Tape<T>::current() && any) {
    mark_output(out);
    std::vector<Tensor<T>> touched = route_logits;
    touched.push_back(weights);
    touched.push_back(out);
    std::vector<Tensor<T>> routes = route_logits;
    Tape<T>::current()->record(std::move(touched), [routes, weights = weights, out, rows, v, k]() mutable {
      auto go = out.grad();
      auto wv2 = weights.values();
      for (size_t i = 0; i < k; ++i) {
        auto lv = routes[i].values();
        if (routes[i].needs_grad()) {
          auto gl = routes[i].grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T w = wv2[r * k + i];
            const T* g = go.data() + r * v;
            T* dst = gl.data() + r * v;
            for (int64_t j = 0; j < v; ++j) dst[j] += w * g[j];
          }
        }
        if (weights.needs_grad()) {
          auto gw = weights.grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* g = go.data() + r * v;
            const T* l = lv.data() + r * v;
            T dot = T(0);
            for (int64_t j = 0; j < v; ++j) dot += g[j] * l[j];
            gw[r * k + i] += dot;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.clone();
}

template <typename T>
std::vector<int64_t> argmax_last(const Tensor<T>& x) {
  const int64_t d = last_dim(x);
  const int64_t rows = x.numel() / d;
  std::vector<int64_t> out(static_cast<size_t>(rows));
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    int64_t best = 0;
    for (int64_t j = 1; j < d; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

template <typename T>
std::vector<int64_t> topk_indices_last(const Tensor<T>& x, int64_t K) {
  const int64_t d = last_dim(x);
  if (K < 1 || K > d) throw ValidationError("topk: K out of range");
  const int64_t rows = x.numel() / d;
  std::vector<int64_t> out(static_cast<size_t>(rows * K));
  auto xv = x.values();
  std::vector<int64_t> idx(static_cast<size_t>(d));
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [row](int64_t a, int64_t b) { return row[a] > row[b]; });
    std::copy(idx.begin(), idx.begin() + K, out.begin() + r * K);
  }
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

#define MODTUNE_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> matmul_t(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> bmm_t(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                       \
  template Tensor<T> reshape(const Tensor<T>&, std::vector<int64_t>);                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                               \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> softmax(const Tensor<T>&);                                                \
  template Tensor<T> apply_causal_mask(const Tensor<T>&);                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int32_t>&,              \
                                   const std::vector<uint8_t>*);                               \
  template Tensor<T> kl_div(const Tensor<T>&, const Tensor<T>&, const std::vector<uint8_t>*);  \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> embedding(const Tensor<T>&, const Tokens&);                               \
  template Tensor<T> ensemble_mix(const std::vector<Tensor<T>>&, const Tensor<T>&);            \
  template Tensor<T> detach(const Tensor<T>&);                                                 \
  template std::vector<int64_t> argmax_last(const Tensor<T>&);                                 \
  template std::vector<int64_t> topk_indices_last(const Tensor<T>&, int64_t);                  \
  template bool all_finite(const Tensor<T>&);

MODTUNE_INSTANTIATE_OPS(float)
MODTUNE_INSTANTIATE_OPS(double)

#undef MODTUNE_INSTANTIATE_OPS

}  // namespace modtune::ops
