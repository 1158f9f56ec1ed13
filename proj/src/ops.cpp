#include "acebert/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "acebert/errors.hpp"

namespace acebert::ops {

namespace {

template <class T>
using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <class T>
void check_finite(const char* op, const std::vector<T>& values) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite output from op '") + op + "'");
  }
}

template <class T>
BasicTensor<T> make(const char* op, Shape shape, std::vector<T> values) {
  check_finite(op, values);
  return BasicTensor<T>::from(std::move(shape), std::move(values));
}

// Gradient buffer of an input, or nullptr when it does not need one.
template <class T>
T* grad_of(const ImplPtr<T>& in) {
  if (!in->requires_grad) return nullptr;
  if (in->grad.empty()) in->grad.assign(in->data.size(), T(0));
  return in->grad.data();
}

// Records `fn(out)` as the backward rule of `out` when recording is active
// and any input needs a gradient.
template <class T, class Fn>
void record(const char* op, BasicTensor<T>& out, std::initializer_list<const BasicTensor<T>*> inputs,
            Fn&& fn) {
  GradTape* tape = active_tape();
  if (tape == nullptr) return;
  bool needed = false;
  for (const auto* in : inputs) needed = needed || in->requires_grad();
  if (!needed) return;
  ImplPtr<T> o = out.impl_ptr();
  o->requires_grad = true;
  o->tape = tape;
  tape->record({op,
                [o, fn = std::forward<Fn>(fn)]() {
                  if (!o->grad.empty()) fn(*o);
                },
                [o]() { o->grad.clear(); }});
}

template <class T>
void record_many(const char* op, BasicTensor<T>& out, const std::vector<BasicTensor<T>>& inputs,
                 std::function<void(detail::TensorImpl<T>&)> fn) {
  GradTape* tape = active_tape();
  if (tape == nullptr) return;
  bool needed = false;
  for (const auto& in : inputs) needed = needed || in.requires_grad();
  if (!needed) return;
  ImplPtr<T> o = out.impl_ptr();
  o->requires_grad = true;
  o->tape = tape;
  tape->record({op,
                [o, fn = std::move(fn)]() {
                  if (!o->grad.empty()) fn(*o);
                },
                [o]() { o->grad.clear(); }});
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

void check_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (!is_suffix(a, b)) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " are not compatible (b must equal a trailing suffix of a)");
  }
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return ShapeError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t k = sa.back();
  std::size_t batch = 1;
  std::size_t m = 0;
  const std::size_t n = sb.back();
  bool batched = false;
  if (sb.size() == 2) {
    if (sb[0] != k) throw mismatch();
    m = a.numel() / k;
  } else {
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()) || sb[sb.size() - 2] != k) {
      throw mismatch();
    }
    batched = true;
    m = sa[sa.size() - 2];
    batch = a.numel() / (m * k);
  }
  Shape out_shape = sa;
  out_shape.back() = n;
  std::vector<T> out(batch * m * n);
  const std::size_t b_stride = batched ? k * n : 0;
  for (std::size_t bi = 0; bi < batch; ++bi) {
    CMapR<T> A(a.data().data() + bi * m * k, m, k);
    CMapR<T> B(b.data().data() + bi * b_stride, k, n);
    MapR<T> C(out.data() + bi * m * n, m, n);
    C.noalias() = A * B;
  }
  auto result = make<T>("matmul", std::move(out_shape), std::move(out));
  record<T>("matmul", result, {&a, &b}, [ai = a.impl_ptr(), bimpl = b.impl_ptr(), batch, m, k, n, b_stride](auto& o) {
    T* ga = grad_of(ai);
    T* gb = grad_of(bimpl);
    for (std::size_t bi = 0; bi < batch; ++bi) {
      CMapR<T> G(o.grad.data() + bi * m * n, m, n);
      if (ga) {
        CMapR<T> B(bimpl->data.data() + bi * b_stride, k, n);
        MapR<T>(ga + bi * m * k, m, k).noalias() += G * B.transpose();
      }
      if (gb) {
        CMapR<T> A(ai->data.data() + bi * m * k, m, k);
        MapR<T>(gb + bi * b_stride, k, n).noalias() += A.transpose() * G;
      }
    }
  });
  return result;
}

namespace {

enum class Binary { kAdd, kSub, kMul };

template <class T>
BasicTensor<T> binary(const char* op, Binary kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_broadcast(op, a.shape(), b.shape());
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  const auto da = a.data();
  const auto db = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = da[i];
    const T y = db[i % inner];
    out[i] = kind == Binary::kAdd ? x + y : kind == Binary::kSub ? x - y : x * y;
  }
  auto result = make<T>(op, a.shape(), std::move(out));
  record<T>(op, result, {&a, &b}, [ai = a.impl_ptr(), bi = b.impl_ptr(), kind, n, inner](auto& o) {
    T* ga = grad_of(ai);
    T* gb = grad_of(bi);
    for (std::size_t i = 0; i < n; ++i) {
      const T g = o.grad[i];
      const std::size_t j = i % inner;
      switch (kind) {
        case Binary::kAdd:
          if (ga) ga[i] += g;
          if (gb) gb[j] += g;
          break;
        case Binary::kSub:
          if (ga) ga[i] += g;
          if (gb) gb[j] -= g;
          break;
        case Binary::kMul:
          if (ga) ga[i] += g * bi->data[j];
          if (gb) gb[j] += g * ai->data[i];
          break;
      }
    }
  });
  return result;
}

}  // namespace

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary("add", Binary::kAdd, a, b);
}
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary("sub", Binary::kSub, a, b);
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary("mul", Binary::kMul, a, b);
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto result = make<T>("scale", a.shape(), std::move(out));
  record<T>("scale", result, {&a}, [ai = a.impl_ptr(), factor](auto& o) {
    T* ga = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += factor * o.grad[i];
  });
  return result;
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += offset;
  auto result = make<T>("add_scalar", a.shape(), std::move(out));
  record<T>("add_scalar", result, {&a}, [ai = a.impl_ptr()](auto& o) {
    T* ga = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
  return result;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(s));
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s.back();
  const std::size_t batch = a.numel() / (r * c);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape.back());
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = d[b * r * c + i * c + j];
    }
  }
  auto result = make<T>("transpose", std::move(out_shape), std::move(out));
  record<T>("transpose", result, {&a}, [ai = a.impl_ptr(), batch, r, c](auto& o) {
    T* ga = grad_of(ai);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) ga[b * r * c + i * c + j] += o.grad[b * r * c + j * r + i];
      }
    }
  });
  return result;
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  auto result = BasicTensor<T>::from(std::move(shape), std::move(out));
  record<T>("reshape", result, {&a}, [ai = a.impl_ptr()](auto& o) {
    T* ga = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
  return result;
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) + " differ off-axis");
    widths.push_back(s[axis] * inner);
    out_shape[axis] += s[axis];
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto d = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.data() + o * widths[p], widths[p], out.data() + o * row + offset);
    }
    offset += widths[p];
  }
  auto result = make<T>("concat", std::move(out_shape), std::move(out));
  std::vector<ImplPtr<T>> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  record_many<T>("concat", result, parts, [impls, widths, outer, row](detail::TensorImpl<T>& o) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < impls.size(); ++p) {
      if (T* g = grad_of(impls[p])) {
        for (std::size_t q = 0; q < outer; ++q) {
          const T* src = o.grad.data() + q * row + off;
          T* dst = g + q * widths[p];
          for (std::size_t i = 0; i < widths[p]; ++i) dst[i] += src[i];
        }
      }
      off += widths[p];
    }
  });
  return result;
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t src_row = s[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<T> out(outer * width);
  const auto d = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(d.data() + o * src_row + begin * inner, width, out.data() + o * width);
  }
  auto result = make<T>("slice", std::move(out_shape), std::move(out));
  record<T>("slice", result, {&a}, [ai = a.impl_ptr(), outer, src_row, width, begin, inner](auto& o) {
    T* ga = grad_of(ai);
    for (std::size_t q = 0; q < outer; ++q) {
      for (std::size_t i = 0; i < width; ++i) ga[q * src_row + begin * inner + i] += o.grad[q * width + i];
    }
  });
  return result;
}

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::int64_t> indices) {
  const Shape& s = table.shape();
  if (s.empty()) throw ShapeError("gather_rows: table must have rank >= 1");
  const std::size_t rows = s[0];
  const std::size_t width = table.numel() / std::max<std::size_t>(rows, 1);
  Shape out_shape = s;
  out_shape[0] = indices.size();
  std::vector<T> out(indices.size() * width);
  const auto d = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range for table " + shape_str(s));
    }
    std::copy_n(d.data() + idx * width, width, out.data() + i * width);
  }
  auto result = BasicTensor<T>::from(std::move(out_shape), std::move(out));
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  record<T>("gather_rows", result, {&table}, [ti = table.impl_ptr(), idx = std::move(idx), width](auto& o) {
    T* g = grad_of(ti);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = g + idx[i] * width;
      const T* src = o.grad.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
  return result;
}

template <class T>
BasicTensor<T> pick(const BasicTensor<T>& a, std::span<const std::int64_t> indices) {
  const Shape& s = a.shape();
  if (s.size() != 2 || s[0] != indices.size()) {
    throw ShapeError("pick: expected (" + std::to_string(indices.size()) + "xC) input, got " + shape_str(s));
  }
  const std::size_t cols = s[1];
  std::vector<T> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= cols) {
      throw IndexError("pick: index " + std::to_string(indices[i]) + " out of range for " + shape_str(s));
    }
    out[i] = a.data()[i * cols + indices[i]];
  }
  auto result = make<T>("pick", {indices.size()}, std::move(out));
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  record<T>("pick", result, {&a}, [ai = a.impl_ptr(), idx = std::move(idx), cols](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * cols + idx[i]] += o.grad[i];
  });
  return result;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
  const std::size_t c = last_dim(a.shape());
  const std::size_t rows = a.numel() / c;
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = d.data() + r * c;
    T* y = out.data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= total;
  }
  auto result = make<T>("softmax", a.shape(), std::move(out));
  record<T>("softmax", result, {&a}, [ai = a.impl_ptr(), rows, c](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.data.data() + r * c;
      const T* gy = o.grad.data() + r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
    }
  });
  return result;
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a) {
  const std::size_t c = last_dim(a.shape());
  const std::size_t rows = a.numel() / c;
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = d.data() + r * c;
    T* y = out.data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(x[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  auto result = make<T>("log_softmax", a.shape(), std::move(out));
  record<T>("log_softmax", result, {&a}, [ai = a.impl_ptr(), rows, c](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.data.data() + r * c;
      const T* gy = o.grad.data() + r * c;
      T total = 0;
      for (std::size_t j = 0; j < c; ++j) total += gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
  return result;
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(d[i]);
  auto result = make<T>("log", a.shape(), std::move(out));
  record<T>("log", result, {&a}, [ai = a.impl_ptr()](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / ai->data[i];
  });
  return result;
}

template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& a, T lo, T hi) {
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(d[i], lo, hi);
  auto result = make<T>("clamp", a.shape(), std::move(out));
  record<T>("clamp", result, {&a}, [ai = a.impl_ptr(), lo, hi](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T x = ai->data[i];
      if (x >= lo && x <= hi) g[i] += o.grad[i];
    }
  });
  return result;
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
  const std::size_t c = last_dim(x.shape());
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                     " and bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  auto normed = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const auto d = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = d.data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (xr[j] - mu) * is;
      (*normed)[r * c + j] = xh;
      out[r * c + j] = xh * gd[j] + bd[j];
    }
  }
  auto result = make<T>("layer_norm", x.shape(), std::move(out));
  record<T>("layer_norm", result, {&x, &gain, &bias},
            [xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(), normed, inv_std, rows, c](auto& o) {
              T* gx = grad_of(xi);
              T* gg = grad_of(gi);
              T* gb = grad_of(bi);
              std::vector<T> dxh(c);
              for (std::size_t r = 0; r < rows; ++r) {
                const T* gy = o.grad.data() + r * c;
                const T* xh = normed->data() + r * c;
                T mean_d = 0;
                T mean_dx = 0;
                for (std::size_t j = 0; j < c; ++j) {
                  if (gg) gg[j] += gy[j] * xh[j];
                  if (gb) gb[j] += gy[j];
                  dxh[j] = gy[j] * gi->data[j];
                  mean_d += dxh[j];
                  mean_dx += dxh[j] * xh[j];
                }
                if (!gx) continue;
                mean_d /= T(c);
                mean_dx /= T(c);
                const T is = (*inv_std)[r];
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += is * (dxh[j] - mean_d - xh[j] * mean_dx);
              }
            });
  return result;
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * d[i] * (T(1) + std::erf(d[i] * inv_sqrt2));
  auto result = make<T>("gelu", a.shape(), std::move(out));
  record<T>("gelu", result, {&a}, [ai = a.impl_ptr(), inv_sqrt2](auto& o) {
    const T inv_sqrt2pi = T(0.39894228040143267794);
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T x = ai->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      g[i] += o.grad[i] * (cdf + x * pdf);
    }
  });
  return result;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > T(0) ? d[i] : T(0);
  auto result = make<T>("relu", a.shape(), std::move(out));
  record<T>("relu", result, {&a}, [ai = a.impl_ptr()](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (ai->data[i] > T(0)) g[i] += o.grad[i];
    }
  });
  return result;
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = d[i];
    // Branch keeps exp() from overflowing for large |x|.
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  auto result = make<T>("sigmoid", a.shape(), std::move(out));
  record<T>("sigmoid", result, {&a}, [ai = a.impl_ptr()](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T y = o.data[i];
      g[i] += o.grad[i] * y * (T(1) - y);
    }
  });
  return result;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = 0;
  for (const T v : a.data()) total += v;
  auto result = make<T>("sum", {}, {total});
  record<T>("sum", result, {&a}, [ai = a.impl_ptr()](auto& o) {
    T* g = grad_of(ai);
    const T gy = o.grad[0];
    for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += gy;
  });
  return result;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor " + shape_str(a.shape()));
  return scale(sum(a), T(1) / T(a.numel()));
}

template <class T>
BasicTensor<T> sum_last(const BasicTensor<T>& a) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("sum_last: needs rank >= 1");
  const std::size_t c = s.back();
  const std::size_t rows = a.numel() / std::max<std::size_t>(c, 1);
  std::vector<T> out(rows, T(0));
  const auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r] += d[r * c + j];
  }
  Shape out_shape(s.begin(), s.end() - 1);
  auto result = make<T>("sum_last", std::move(out_shape), std::move(out));
  record<T>("sum_last", result, {&a}, [ai = a.impl_ptr(), rows, c](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[r];
    }
  });
  return result;
}

template <class T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& a) {
  const std::size_t c = last_dim(a.shape());
  const std::size_t rows = a.numel() / c;
  std::vector<T> out(a.numel());
  auto norms = std::make_shared<std::vector<T>>(rows);
  const auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = 0;
    for (std::size_t j = 0; j < c; ++j) sq += d[r * c + j] * d[r * c + j];
    const T norm = std::sqrt(sq);
    (*norms)[r] = norm;
    for (std::size_t j = 0; j < c; ++j) {
      out[r * c + j] = norm > std::numeric_limits<T>::min() ? d[r * c + j] / norm : T(1) / std::sqrt(T(c));
    }
  }
  auto result = make<T>("l2_normalize", a.shape(), std::move(out));
  record<T>("l2_normalize", result, {&a}, [ai = a.impl_ptr(), norms, rows, c](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      const T norm = (*norms)[r];
      if (!(norm > std::numeric_limits<T>::min())) continue;
      const T* y = o.data.data() + r * c;
      const T* gy = o.grad.data() + r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += (gy[j] - y[j] * dot) / norm;
    }
  });
  return result;
}

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw Error("dropout rate must be < 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto mask = std::make_shared<std::vector<T>>(a.numel());
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = u(rng) < rate ? T(0) : keep_scale;
    out[i] = d[i] * (*mask)[i];
  }
  auto result = make<T>("dropout", a.shape(), std::move(out));
  record<T>("dropout", result, {&a}, [ai = a.impl_ptr(), mask](auto& o) {
    T* g = grad_of(ai);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
  });
  return result;
}

template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                                    std::span<const std::uint8_t> key_mask, std::vector<T>* probabilities) {
  const Shape& s = qkv.shape();
  if (s.size() != 2 || s[0] != batch * seq || s[1] % 3 != 0 || heads == 0 || (s[1] / 3) % heads != 0) {
    throw ShapeError("multi_head_attention: qkv " + shape_str(s) + " incompatible with batch=" +
                     std::to_string(batch) + " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
  }
  if (key_mask.size() != batch * seq) {
    throw ShapeError("multi_head_attention: mask length " + std::to_string(key_mask.size()) + " != " +
                     std::to_string(batch * seq));
  }
  const std::size_t dm = s[1] / 3;
  const std::size_t dh = dm / heads;
  const std::size_t stride = 3 * dm;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq * seq, T(0));
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  std::vector<T> out(batch * seq * dm);
  const T* base = qkv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* mb = mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      const T* row0 = base + b * seq * stride;
      CSMapR<T> Q(row0 + h * dh, seq, dh, Eigen::OuterStride<>(stride));
      CSMapR<T> K(row0 + dm + h * dh, seq, dh, Eigen::OuterStride<>(stride));
      CSMapR<T> V(row0 + 2 * dm + h * dh, seq, dh, Eigen::OuterStride<>(stride));
      MapR<T> P(probs->data() + (b * heads + h) * seq * seq, seq, seq);
      P.noalias() = (Q * K.transpose()) * scale_factor;
      for (std::size_t i = 0; i < seq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (mb[j]) mx = std::max(mx, P(i, j));
        }
        T total = 0;
        for (std::size_t j = 0; j < seq; ++j) {
          const T e = mb[j] ? std::exp(P(i, j) - mx) : T(0);
          P(i, j) = e;
          total += e;
        }
        if (!(total > T(0))) throw NumericError("multi_head_attention: a sequence has no unmasked key");
        for (std::size_t j = 0; j < seq; ++j) P(i, j) /= total;
      }
      SMapR<T> O(out.data() + b * seq * dm + h * dh, seq, dh, Eigen::OuterStride<>(dm));
      O.noalias() = P * V;
    }
  }
  if (probabilities != nullptr) *probabilities = *probs;
  auto result = make<T>("multi_head_attention", {batch * seq, dm}, std::move(out));
  record<T>("multi_head_attention", result, {&qkv},
            [qi = qkv.impl_ptr(), probs, batch, seq, heads, dm, dh, stride, scale_factor](auto& o) {
              T* g = grad_of(qi);
              const T* base = qi->data.data();
              MatR<T> dP(seq, seq);
              for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                  const std::size_t off = b * seq * stride;
                  CSMapR<T> Q(base + off + h * dh, seq, dh, Eigen::OuterStride<>(stride));
                  CSMapR<T> K(base + off + dm + h * dh, seq, dh, Eigen::OuterStride<>(stride));
                  CSMapR<T> V(base + off + 2 * dm + h * dh, seq, dh, Eigen::OuterStride<>(stride));
                  SMapR<T> dQ(g + off + h * dh, seq, dh, Eigen::OuterStride<>(stride));
                  SMapR<T> dK(g + off + dm + h * dh, seq, dh, Eigen::OuterStride<>(stride));
                  SMapR<T> dV(g + off + 2 * dm + h * dh, seq, dh, Eigen::OuterStride<>(stride));
                  CMapR<T> P(probs->data() + (b * heads + h) * seq * seq, seq, seq);
                  CSMapR<T> dO(o.grad.data() + b * seq * dm + h * dh, seq, dh, Eigen::OuterStride<>(dm));
                  dV.noalias() += P.transpose() * dO;
                  dP.noalias() = dO * V.transpose();
                  for (std::size_t i = 0; i < seq; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j < seq; ++j) dot += dP(i, j) * P(i, j);
                    for (std::size_t j = 0; j < seq; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale_factor;
                  }
                  dQ.noalias() += dP * K;
                  dK.noalias() += dP.transpose() * Q;
                }
              }
            });
  return result;
}

#define ACEBERT_INSTANTIATE_OPS(T)                                                                              \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                     \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                               \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                             \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);                 \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::int64_t>);                   \
  template BasicTensor<T> pick(const BasicTensor<T>&, std::span<const std::int64_t>);                          \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> clamp(const BasicTensor<T>&, T, T);                                                  \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);  \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> sum_last(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> l2_normalize(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, std::mt19937_64&);                            \
  template BasicTensor<T> multi_head_attention(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t,   \
                                               std::span<const std::uint8_t>, std::vector<T>*);

ACEBERT_INSTANTIATE_OPS(float)
ACEBERT_INSTANTIATE_OPS(double)

}  // namespace acebert::ops
