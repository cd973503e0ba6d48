#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "segtran/init.hpp"
#include "segtran/ops.hpp"
#include "segtran/param_store.hpp"

namespace segtran {

enum class PeKind { none, fixed, discrete, learnable };

/// Coordinates of an H×W grid in row-major order, (x, y) = (col/(W−1), row/(H−1)).
/// A unit extent maps to coordinate 0.
template <Real T>
Tensor<T> normalize_coords(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("normalize_coords: empty grid");
  Tensor<T> coords(Shape{height * width, 2});
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t unit = r * width + c;
      coords.at(unit, 0) = width > 1 ? static_cast<T>(c) / static_cast<T>(width - 1) : T(0);
      coords.at(unit, 1) = height > 1 ? static_cast<T>(r) / static_cast<T>(height - 1) : T(0);
    }
  }
  return coords;
}

/// Per-channel coefficients of the learnable sinusoid: pos_i = f(a_i·x + b_i·y + c_i).
struct PeWeights {
  ParamId a = 0, b = 0, c = 0;
};

template <Real T>
PeWeights make_pe_weights(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                          Rng& rng) {
  if (channels % 2 != 0) {
    throw ConfigError("learnable positional encoding needs an even channel count, got " +
                      std::to_string(channels));
  }
  PeWeights w;
  w.a = store.add(prefix + ".a", uniform_tensor<T>(Shape{channels}, -6.0, 6.0, rng));
  w.b = store.add(prefix + ".b", uniform_tensor<T>(Shape{channels}, -6.0, 6.0, rng));
  w.c = store.add(prefix + ".c", uniform_tensor<T>(Shape{channels}, 0.0, 2.0 * std::numbers::pi, rng));
  return w;
}

// sin of the first C/2 channels, cos of the rest; every channel has its own
// (a, b, c).
template <Real T>
Var<T> learnable_sinusoidal_pe(Graph<T>& graph, const Var<T>& coords, const PeWeights& w) {
  Var<T> a = graph.param(w.a), b = graph.param(w.b), c = graph.param(w.c);
  const std::size_t channels = a.size();
  if (channels % 2 != 0) {
    throw ConfigError("learnable positional encoding needs an even channel count, got " +
                      std::to_string(channels));
  }
  if (coords.value().rank() != 2 || coords.dim(1) != 2) {
    throw DimensionError("positional encoding expects N×2 coordinates, got " + to_string(coords.shape()));
  }
  Var<T> x = slice_cols(coords, 0, 1);
  Var<T> y = slice_cols(coords, 1, 1);
  Var<T> phase = add(matmul(x, reshape(a, Shape{1, channels})), matmul(y, reshape(b, Shape{1, channels})));
  phase = add_row_bias(phase, c);
  const std::size_t half = channels / 2;
  return concat_cols<T>({sin(slice_cols(phase, 0, half)), cos(slice_cols(phase, half, half))});
}

/// Parameter-free baseline. Channels [0, C/2) encode x and [C/2, C) encode y;
/// within each half, channel pairs (sin, cos) use angle coord / 10000^(2f/(C/2)).
template <Real T>
Tensor<T> fixed_sinusoidal_pe(const Tensor<T>& coords, std::size_t channels) {
  if (channels == 0 || channels % 4 != 0) {
    throw ConfigError("fixed sinusoidal encoding needs a channel count divisible by 4, got " +
                      std::to_string(channels));
  }
  const std::size_t n = coords.dim(0), half = channels / 2, freqs = half / 2;
  Tensor<T> out(Shape{n, channels});
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const double coord = coords.at(u, axis);
      for (std::size_t f = 0; f < freqs; ++f) {
        const double angle = coord / std::pow(10000.0, 2.0 * static_cast<double>(f) / static_cast<double>(half));
        out.at(u, axis * half + 2 * f) = static_cast<T>(std::sin(angle));
        out.at(u, axis * half + 2 * f + 1) = static_cast<T>(std::cos(angle));
      }
    }
  }
  return out;
}

/// One trainable row per grid position; no continuity between rows.
template <Real T>
Var<T> discrete_learned_pe(const std::vector<std::size_t>& grid_index, const Var<T>& table) {
  return gather_rows(table, grid_index);
}

/// Encoding configuration for one transformer-input grid.
struct PeParams {
  PeKind kind = PeKind::none;
  std::size_t grid_h = 0, grid_w = 0, channels = 0;
  PeWeights weights;
  ParamId table = 0;
};

template <Real T>
PeParams make_pe(ParamStore<T>& store, PeKind kind, std::size_t grid_h, std::size_t grid_w,
                 std::size_t channels, Rng& rng) {
  PeParams p{kind, grid_h, grid_w, channels, {}, 0};
  switch (kind) {
    case PeKind::learnable:
      p.weights = make_pe_weights(store, "pe", channels, rng);
      break;
    case PeKind::discrete:
      p.table = store.add("pe.table", normal_tensor<T>(Shape{grid_h * grid_w, channels}, 0.0, 1.0, rng));
      break;
    case PeKind::fixed:
      if (channels % 4 != 0) {
        throw ConfigError("fixed sinusoidal encoding needs a channel count divisible by 4, got " +
                          std::to_string(channels));
      }
      break;
    case PeKind::none:
      break;
  }
  return p;
}

/// Encoding for every unit of the grid, [H·W × C]. Scheme none is all zeros.
template <Real T>
Var<T> positional_encoding(Graph<T>& graph, const PeParams& p) {
  const std::size_t n = p.grid_h * p.grid_w;
  switch (p.kind) {
    case PeKind::learnable:
      return learnable_sinusoidal_pe(graph, graph.constant(normalize_coords<T>(p.grid_h, p.grid_w)), p.weights);
    case PeKind::fixed:
      return graph.constant(fixed_sinusoidal_pe(normalize_coords<T>(p.grid_h, p.grid_w), p.channels));
    case PeKind::discrete: {
      Var<T> table = graph.param(p.table);
      if (table.dim(0) != n) {
        throw ConfigError("discrete encoding table has " + std::to_string(table.dim(0)) +
                          " rows but the grid has " + std::to_string(n) + " units");
      }
      std::vector<std::size_t> index(n);
      for (std::size_t i = 0; i < n; ++i) index[i] = i;
      return discrete_learned_pe(index, table);
    }
    case PeKind::none:
      break;
  }
  return graph.constant(Tensor<T>(Shape{n, p.channels}));
}

}  // namespace segtran
