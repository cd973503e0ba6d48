#pragma once

// Differentiable tensor operations. Each op computes its forward value and
// records the backward rule on the tape shared by its inputs.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "segtran/autodiff.hpp"
#include "segtran/kernels.hpp"
#include "segtran/tensor.hpp"

namespace segtran {

namespace detail {

template <Real T>
Tape<T>& common_tape(const Var<T>& a, const Var<T>& b) {
  if (!a.valid() || a.tape_ptr() != b.tape_ptr()) {
    throw UsageError("operands are recorded on different tapes");
  }
  return a.tape();
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(shape));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
  }
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <Real T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(A.shape()) + " by " +
                         to_string(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> C(Shape{m, n});
  kernels::gemm_nn(m, k, n, A.data().data(), B.data().data(), C.data().data());
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n](std::span<const T> dc) {
    Tape<T>& tp = a.tape();
    if (auto da = tp.grad_sink(a)) kernels::gemm_nt(m, n, k, dc.data(), b.value().data().data(), da->data());
    if (auto db = tp.grad_sink(b)) kernels::gemm_tn(k, m, n, a.value().data().data(), dc.data(), db->data());
  });
}

// A[m×k] · B[n×k]ᵀ
template <Real T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) {
    throw DimensionError("matmul_nt: cannot multiply " + to_string(A.shape()) +
                         " by transpose of " + to_string(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  Tensor<T> C(Shape{m, n});
  kernels::gemm_nt(m, k, n, A.data().data(), B.data().data(), C.data().data());
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n](std::span<const T> dc) {
    Tape<T>& tp = a.tape();
    if (auto da = tp.grad_sink(a)) kernels::gemm_nn(m, n, k, dc.data(), b.value().data().data(), da->data());
    if (auto db = tp.grad_sink(b)) kernels::gemm_tn(n, m, k, dc.data(), a.value().data().data(), db->data());
  });
}

template <Real T>
Var<T> transpose(const Var<T>& a) {
  const Tensor<T>& A = a.value();
  detail::require_rank(A.shape(), 2, "transpose");
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor<T> out(Shape{c, r});
  kernels::transpose(r, c, A.data().data(), out.data().data());
  return a.tape().record(std::move(out), {a}, [a, r, c](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*da)[i * c + j] += g[j * r + i];
    }
  });
}

// ---------------------------------------------------------------- elementwise

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(a, b);
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](std::span<const T> g) {
    Tape<T>& tp = a.tape();
    if (auto da = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    if (auto db = tp.grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
  });
}

template <Real T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(a, b);
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](std::span<const T> g) {
    Tape<T>& tp = a.tape();
    if (auto da = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    if (auto db = tp.grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
  });
}

template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(a, b);
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](std::span<const T> g) {
    Tape<T>& tp = a.tape();
    if (auto da = tp.grad_sink(a)) {
      const auto bv = b.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
    }
    if (auto db = tp.grad_sink(b)) {
      const auto av = a.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
    }
  });
}

template <Real T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(a, b);
  detail::require_same(a.shape(), b.shape(), "div");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](std::span<const T> g) {
    Tape<T>& tp = a.tape();
    const auto av = a.value().data();
    const auto bv = b.value().data();
    if (auto da = tp.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] / bv[i];
    if (auto db = tp.grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

template <Real T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * s;
  });
}

template <Real T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v += s;
  return a.tape().record(std::move(out), {a}, [a](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
  });
}

template <Real T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = v * detail::sigmoid(v);
  return a.tape().record(std::move(out), {a}, [a](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a)) {
      const auto x = a.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = detail::sigmoid(x[i]);
        (*da)[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    }
  });
}

template <Real T>
Var<T> sin(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = std::sin(v);
  return a.tape().record(std::move(out), {a}, [a](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a)) {
      const auto x = a.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * std::cos(x[i]);
    }
  });
}

template <Real T>
Var<T> cos(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = std::cos(v);
  return a.tape().record(std::move(out), {a}, [a](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a)) {
      const auto x = a.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] -= g[i] * std::sin(x[i]);
    }
  });
}

// ---------------------------------------------------------------- broadcasts

// X[N×C] + b[C] on every row.
template <Real T>
Var<T> add_row_bias(const Var<T>& x, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(x, b);
  detail::require_rank(x.shape(), 2, "add_row_bias");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (b.size() != c) {
    throw DimensionError("add_row_bias: bias " + to_string(b.shape()) + " vs rows of " +
                         to_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  return tape.record(std::move(out), {x, b}, [x, b, n, c](std::span<const T> g) {
    Tape<T>& tp = x.tape();
    if (auto dx = tp.grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
    if (auto db = tp.grad_sink(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*db)[j] += g[i * c + j];
  });
}

// X[N×C] ∘ s[C] on every row.
template <Real T>
Var<T> mul_row(const Var<T>& x, const Var<T>& s) {
  Tape<T>& tape = detail::common_tape(x, s);
  detail::require_rank(x.shape(), 2, "mul_row");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (s.size() != c) {
    throw DimensionError("mul_row: scale " + to_string(s.shape()) + " vs rows of " +
                         to_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto sv = s.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= sv[j];
  return tape.record(std::move(out), {x, s}, [x, s, n, c](std::span<const T> g) {
    Tape<T>& tp = x.tape();
    if (auto dx = tp.grad_sink(x)) {
      const auto sv = s.value().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*dx)[i * c + j] += g[i * c + j] * sv[j];
    }
    if (auto ds = tp.grad_sink(s)) {
      const auto xv = x.value().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ds)[j] += g[i * c + j] * xv[i * c + j];
    }
  });
}

// Row i of X[N×C] scaled by w[i].
template <Real T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& w) {
  Tape<T>& tape = detail::common_tape(x, w);
  detail::require_rank(x.shape(), 2, "scale_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (w.size() != n) {
    throw DimensionError("scale_rows: weights " + to_string(w.shape()) + " vs " +
                         to_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto wv = w.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= wv[i];
  return tape.record(std::move(out), {x, w}, [x, w, n, c](std::span<const T> g) {
    Tape<T>& tp = x.tape();
    if (auto dx = tp.grad_sink(x)) {
      const auto wv = w.value().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*dx)[i * c + j] += g[i * c + j] * wv[i];
    }
    if (auto dw = tp.grad_sink(w)) {
      const auto xv = x.value().data();
      for (std::size_t i = 0; i < n; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * xv[i * c + j];
        (*dw)[i] += acc;
      }
    }
  });
}

// X[C×H×W] + b[C] per channel plane.
template <Real T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(x, b);
  detail::require_rank(x.shape(), 3, "add_channel_bias");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (b.size() != c) {
    throw DimensionError("add_channel_bias: bias " + to_string(b.shape()) + " vs " +
                         to_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto bv = b.value().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] += bv[ch];
  return tape.record(std::move(out), {x, b}, [x, b, c, plane](std::span<const T> g) {
    Tape<T>& tp = x.tape();
    if (auto dx = tp.grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
    if (auto db = tp.grad_sink(b))
      for (std::size_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += g[ch * plane + p];
        (*db)[ch] += acc;
      }
  });
}

// ---------------------------------------------------------------- reductions

namespace detail {

// Neumaier-compensated sum; error stays near one rounding regardless of length.
template <Real T>
T compensated_sum(const T* v, std::size_t n) {
  T total = 0, carry = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T t = total + v[i];
    if (std::abs(total) >= std::abs(v[i])) {
      carry += (total - t) + v[i];
    } else {
      carry += (v[i] - t) + total;
    }
    total = t;
  }
  return total + carry;
}

}  // namespace detail

template <Real T>
Var<T> sum(const Var<T>& a) {
  const T total = detail::compensated_sum(a.value().data().data(), a.size());
  return a.tape().record(Tensor<T>::scalar(total), {a}, [a](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a))
      for (T& v : *da) v += g[0];
  });
}

template <Real T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum over everything after the first axis: X[R×...] -> [R].
template <Real T>
Var<T> row_sum(const Var<T>& x) {
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.size() / rows;
  Tensor<T> out(Shape{rows});
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) out[r] = detail::compensated_sum(xv.data() + r * cols, cols);
  return x.tape().record(std::move(out), {x}, [x, rows, cols](std::span<const T> g) {
    if (auto dx = x.tape().grad_sink(x))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) (*dx)[r * cols + j] += g[r];
  });
}

// ---------------------------------------------------------------- normalizers

template <Real T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "softmax");
  Tensor<T> out(x.shape());
  const auto xv = x.value().data();
  auto yv = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      T total = 0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(xv[base + l * s.inner] - mx);
        yv[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) yv[base + l * s.inner] /= total;
    }
  }
  if (!x.requires_grad()) return x.tape().record(std::move(out), {x}, {});
  std::vector<T> cached = out.storage();
  return x.tape().record(std::move(out), {x}, [x, s, yv = std::move(cached)](std::span<const T> g) {
    if (auto dx = x.tape().grad_sink(x)) {
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          T dot = 0;
          for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * yv[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t idx = base + l * s.inner;
            (*dx)[idx] += yv[idx] * (g[idx] - dot);
          }
        }
      }
    }
  });
}

template <Real T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "log_softmax");
  Tensor<T> out(x.shape());
  std::vector<T> probs(x.size());
  const auto xv = x.value().data();
  auto yv = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      T total = 0;
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(xv[base + l * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t idx = base + l * s.inner;
        yv[idx] = xv[idx] - lse;
        probs[idx] = std::exp(yv[idx]);
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [x, s, probs = std::move(probs)](std::span<const T> g) {
    if (auto dx = x.tape().grad_sink(x)) {
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          T total = 0;
          for (std::size_t l = 0; l < s.len; ++l) total += g[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t idx = base + l * s.inner;
            (*dx)[idx] += g[idx] - probs[idx] * total;
          }
        }
      }
    }
  });
}

// Per-row standardization of X[N×C]: (x − mean) / sqrt(var + eps).
template <Real T>
Var<T> standardize_rows(const Var<T>& x, T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 2, "standardize_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(n);
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * inv_std[i];
  }
  std::vector<T> xhat = out.storage();
  return x.tape().record(std::move(out), {x},
                         [x, n, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](std::span<const T> g) {
    if (auto dx = x.tape().grad_sink(x)) {
      for (std::size_t i = 0; i < n; ++i) {
        T mg = 0, mgx = 0;
        for (std::size_t j = 0; j < c; ++j) {
          mg += g[i * c + j];
          mgx += g[i * c + j] * xhat[i * c + j];
        }
        mg /= static_cast<T>(c);
        mgx /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t idx = i * c + j;
          (*dx)[idx] += inv_std[i] * (g[idx] - mg - xhat[idx] * mgx);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- spatial

/// Cross-correlation of input[C_in×H×W] with kernel[C_out×C_in×k×k].
template <Real T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t pad) {
  Tape<T>& tape = detail::common_tape(input, kernel);
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  detail::require_rank(xs, 3, "conv2d input");
  detail::require_rank(ks, 4, "conv2d kernel");
  if (ks[1] != xs[0]) {
    throw DimensionError("conv2d: kernel " + to_string(ks) + " expects " + std::to_string(ks[1]) +
                         " input channels, input is " + to_string(xs));
  }
  if (ks[2] != ks[3] || ks[2] % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd extent, got " + to_string(ks));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t k = ks[2];
  if (xs[1] + 2 * pad < k || xs[2] + 2 * pad < k) {
    throw DimensionError("conv2d: kernel " + to_string(ks) + " larger than padded input " +
                         to_string(xs) + " (pad " + std::to_string(pad) + ")");
  }
  kernels::ConvGeometry geo{xs[0], xs[1], xs[2], k, stride, pad,
                            (xs[1] + 2 * pad - k) / stride + 1, (xs[2] + 2 * pad - k) / stride + 1};
  const std::size_t cout = ks[0], patch = geo.patch(), positions = geo.positions();
  std::vector<T> cols(patch * positions);
  kernels::im2col(geo, input.value().data().data(), cols.data());
  Tensor<T> out(Shape{cout, geo.out_height, geo.out_width});
  kernels::gemm_nn(cout, patch, positions, kernel.value().data().data(), cols.data(), out.data().data());
  return tape.record(std::move(out), {input, kernel},
                     [input, kernel, geo, cout, cols = std::move(cols)](std::span<const T> g) {
    Tape<T>& tp = input.tape();
    const std::size_t patch = geo.patch(), positions = geo.positions();
    if (auto dk = tp.grad_sink(kernel)) kernels::gemm_nt(cout, positions, patch, g.data(), cols.data(), dk->data());
    if (auto dx = tp.grad_sink(input)) {
      std::vector<T> dcols(patch * positions, T(0));
      kernels::gemm_tn(patch, cout, positions, kernel.value().data().data(), g.data(), dcols.data());
      kernels::col2im(geo, dcols.data(), dx->data());
    }
  });
}

/// Bilinear upsampling of input[C×H×W] by 2 or 4, align-corners-false.
template <Real T>
Var<T> upsample_bilinear(const Var<T>& input, std::size_t factor) {
  detail::require_rank(input.shape(), 3, "upsample_bilinear");
  if (factor != 2 && factor != 4) {
    throw DimensionError("upsample_bilinear: factor must be 2 or 4, got " + std::to_string(factor));
  }
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  auto ay = kernels::make_lerp_axis(h, factor);
  auto ax = kernels::make_lerp_axis(w, factor);
  Tensor<T> out(Shape{c, oh, ow});
  const auto xv = input.value().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = xv.data() + ch * h * w;
    T* oplane = out.data().data() + ch * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const T wy1 = static_cast<T>(ay.w_hi[y]), wy0 = T(1) - wy1;
      const T* r0 = plane + ay.lo[y] * w;
      const T* r1 = plane + ay.hi[y] * w;
      for (std::size_t x = 0; x < ow; ++x) {
        const T wx1 = static_cast<T>(ax.w_hi[x]), wx0 = T(1) - wx1;
        oplane[y * ow + x] = wy0 * (wx0 * r0[ax.lo[x]] + wx1 * r0[ax.hi[x]]) +
                             wy1 * (wx0 * r1[ax.lo[x]] + wx1 * r1[ax.hi[x]]);
      }
    }
  }
  return input.tape().record(std::move(out), {input},
                             [input, c, h, w, oh, ow, ay = std::move(ay), ax = std::move(ax)](std::span<const T> g) {
    if (auto dx = input.tape().grad_sink(input)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* plane = dx->data() + ch * h * w;
        const T* gplane = g.data() + ch * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const T wy1 = static_cast<T>(ay.w_hi[y]), wy0 = T(1) - wy1;
          T* r0 = plane + ay.lo[y] * w;
          T* r1 = plane + ay.hi[y] * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const T wx1 = static_cast<T>(ax.w_hi[x]), wx0 = T(1) - wx1;
            const T gv = gplane[y * ow + x];
            r0[ax.lo[x]] += gv * wy0 * wx0;
            r0[ax.hi[x]] += gv * wy0 * wx1;
            r1[ax.lo[x]] += gv * wy1 * wx0;
            r1[ax.hi[x]] += gv * wy1 * wx1;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------- structural

template <Real T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](std::span<const T> g) {
    if (auto da = a.tape().grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
  });
}

template <Real T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len) {
  detail::require_rank(x.shape(), 2, "slice_cols");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (len == 0 || start + len > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for " + to_string(x.shape()));
  }
  Tensor<T> out(Shape{n, len});
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = xv[i * c + start + j];
  return x.tape().record(std::move(out), {x}, [x, n, c, start, len](std::span<const T> g) {
    if (auto dx = x.tape().grad_sink(x))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j) (*dx)[i * c + start + j] += g[i * len + j];
  });
}

template <Real T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_cols");
    if (p.dim(0) != n || p.tape_ptr() != parts.front().tape_ptr()) {
      throw DimensionError("concat_cols: row count mismatch " + to_string(p.shape()) + " vs " +
                           to_string(parts.front().shape()));
    }
    offsets.push_back(total);
    total += p.dim(1);
  }
  Tensor<T> out(Shape{n, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].value().data();
    const std::size_t w = parts[k].dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offsets[k] + j] = pv[i * w + j];
  }
  return parts.front().tape().record_range(std::move(out), parts,
                                           [parts, offsets, n, total](std::span<const T> g) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (auto dp = parts[k].tape().grad_sink(parts[k])) {
        const std::size_t w = parts[k].dim(1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) (*dp)[i * w + j] += g[i * total + offsets[k] + j];
      }
    }
  });
}

// Row lookup: out[i] = table[indices[i]].
template <Real T>
Var<T> gather_rows(const Var<T>& table, const std::vector<std::size_t>& indices) {
  detail::require_rank(table.shape(), 2, "gather_rows");
  const std::size_t rows = table.dim(0), c = table.dim(1);
  if (indices.empty()) throw UsageError("gather_rows: empty index list");
  Tensor<T> out(Shape{indices.size(), c});
  const auto tv = table.value().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw UsageError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = tv[indices[i] * c + j];
  }
  return table.tape().record(std::move(out), {table}, [table, indices, c](std::span<const T> g) {
    if (auto dt = table.tape().grad_sink(table))
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*dt)[indices[i] * c + j] += g[i * c + j];
  });
}

}  // namespace segtran
