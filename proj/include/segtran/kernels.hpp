#pragma once

// Raw dense kernels. Every reduction runs in a fixed order so repeated calls
// are bitwise reproducible.

#include <cstddef>
#include <span>
#include <vector>

namespace segtran::kernels {

// C[m×n] += A[m×k] · B[k×n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a,
             const T* __restrict b, T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* __restrict arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = arow[t];
      const T* __restrict brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] += Aᵀ · B with A stored [k×m], B stored [k×n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a,
             const T* __restrict b, T* __restrict c) {
  for (std::size_t t = 0; t < k; ++t) {
    const T* __restrict arow = a + t * m;
    const T* __restrict brow = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict src, T* __restrict dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// C[m×n] += A[m×k] · Bᵀ with B stored [n×k]
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, k, n, a, bt.data(), c);
}

struct ConvGeometry {
  std::size_t in_channels, height, width;
  std::size_t kernel, stride, pad;
  std::size_t out_height, out_width;

  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t positions() const { return out_height * out_width; }
};

// cols[(c·k·k) × (H'·W')], zero outside the padded input.
template <class T>
void im2col(const ConvGeometry& g, const T* input, T* cols) {
  const std::size_t positions = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = input + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        T* out = cols + row * positions;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* orow = out + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            for (std::size_t ox = 0; ox < g.out_width; ++ox) orow[ox] = T(0);
            continue;
          }
          const T* irow = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            orow[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0) : irow[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the input layout.
template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* input) {
  const std::size_t positions = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = input + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        const T* src = cols + row * positions;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* irow = plane + static_cast<std::size_t>(iy) * g.width;
          const T* srow = src + oy * g.out_width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.width)) irow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

// One axis of align-corners-false bilinear resampling.
struct LerpAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

inline LerpAxis make_lerp_axis(std::size_t in, std::size_t factor) {
  LerpAxis axis;
  const std::size_t out = in * factor;
  axis.lo.resize(out);
  axis.hi.resize(out);
  axis.w_hi.resize(out);
  const double max_coord = static_cast<double>(in - 1);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = src < 0.0 ? 0.0 : (src > max_coord ? max_coord : src);
    const auto lo = static_cast<std::size_t>(src);
    axis.lo[o] = lo;
    axis.hi[o] = lo + 1 < in ? lo + 1 : lo;
    axis.w_hi[o] = src - static_cast<double>(lo);
  }
  return axis;
}

}  // namespace segtran::kernels
