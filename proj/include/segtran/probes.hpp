#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "segtran/train.hpp"

namespace segtran {

// ---------------------------------------------------------------- receptive field

struct ErfReport {
  Tensor<double> map;  // [H×W] |∂logit/∂input| summed over input channels
  double tau = 0.01;
  double spread_fraction = 0;
  double rms_radius = 0;
  std::size_t class_index = 0;
  std::size_t center_row = 0, center_col = 0;
};

/// Fills spread_fraction and rms_radius from report.map.
inline void summarize_erf(ErfReport& r) {
  const std::size_t h = r.map.dim(0), w = r.map.dim(1);
  double peak = 0;
  for (double v : r.map.data()) peak = std::max(peak, v);
  const double cut = r.tau * peak;
  std::size_t above = 0;
  double sq = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (peak > 0 && r.map.at(y, x) > cut) {
        ++above;
        const double dy = static_cast<double>(y) - static_cast<double>(r.center_row);
        const double dx = static_cast<double>(x) - static_cast<double>(r.center_col);
        sq += dy * dy + dx * dx;
      }
    }
  }
  r.spread_fraction = static_cast<double>(above) / static_cast<double>(h * w);
  r.rms_radius = above ? std::sqrt(sq / static_cast<double>(above)) : 0.0;
}

template <Real T>
using ForwardFn = std::function<Var<T>(Graph<T>&, const Var<T>&)>;

/// Backpropagates one logit at the center pixel (H/2, W/2) to the input.
/// Without a class index the predicted class at the center is used.
template <Real T>
ErfReport erf_probe(const ParamStore<T>& params, const ForwardFn<T>& forward, const Tensor<T>& image,
                    std::optional<std::size_t> class_index = std::nullopt, double tau = 0.01) {
  if (image.rank() != 3) throw DimensionError("erf_probe expects a [D×H×W] image, got " + to_string(image.shape()));
  Graph<T> g(params, false);
  Var<T> input = g.input(image, true);
  Var<T> logits = forward(g, input);
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t cy = h / 2, cx = w / 2;
  std::size_t cls = 0;
  if (class_index) {
    if (*class_index >= k) {
      throw UsageError("class index " + std::to_string(*class_index) + " out of range for " +
                       std::to_string(k) + " classes");
    }
    cls = *class_index;
  } else {
    for (std::size_t c = 1; c < k; ++c)
      if (logits.value().at(c, cy, cx) > logits.value().at(cls, cy, cx)) cls = c;
  }
  Tensor<T> seed(logits.shape());
  seed.at(cls, cy, cx) = T(1);
  g.tape().backward(logits, seed);
  const Tensor<T> grad = g.tape().grad(input);

  ErfReport r;
  r.tau = tau;
  r.class_index = cls;
  r.center_row = cy;
  r.center_col = cx;
  r.map = Tensor<double>(Shape{image.dim(1), image.dim(2)});
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) r.map[i] += std::abs(static_cast<double>(grad[c * plane + i]));
  summarize_erf(r);
  return r;
}

template <Real T>
ErfReport erf_probe(const SegtranModel<T>& model, const Tensor<T>& image,
                    std::optional<std::size_t> class_index = std::nullopt, double tau = 0.01) {
  return erf_probe<T>(
      model.params, [&](Graph<T>& g, const Var<T>& x) { return segtran_forward(g, x, model); }, image,
      class_index, tau);
}

/// The cnn-only counterpart of a model: same backbone, pyramid and head
/// weights, transformer stack and positional encoding removed.
template <Real T>
SegtranModel<T> without_transformer(const SegtranModel<T>& model) {
  SegtranConfig c = model.config;
  c.cnn_only = true;
  SegtranModel<T> out = build_model<T>(c);
  for (ParamId i = 0; i < out.params.size(); ++i) {
    auto j = model.params.find(out.params.name(i));
    if (!j) throw ConfigError("model has no parameter " + out.params.name(i));
    out.params.value(i) = model.params.value(*j);
  }
  return out;
}

/// 8-bit binary PGM of the map scaled by its maximum.
inline std::string erf_pgm(const Tensor<double>& map) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  double peak = 0;
  for (double v : map.data()) peak = std::max(peak, v);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : map.data()) {
    const double scaled = peak > 0 ? std::round(255.0 * v / peak) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0))));
  }
  return out;
}

inline std::string erf_csv(const ErfReport& r) {
  return "tau,spread_fraction,rms_radius\n" + format_number(r.tau) + "," + format_number(r.spread_fraction) + "," +
         format_number(r.rms_radius) + "\n";
}

// ---------------------------------------------------------------- mode knockout

struct KnockoutReport {
  std::size_t mode = 0;
  std::vector<double> before, after;  // per class 0..K−1

  double mean_foreground(const std::vector<double>& d) const {
    double t = 0;
    for (std::size_t c = 1; c < d.size(); ++c) t += d[c];
    return d.size() > 1 ? t / static_cast<double>(d.size() - 1) : 0.0;
  }
  double drop() const { return mean_foreground(before) - mean_foreground(after); }
};

inline std::size_t expanded_modes(const SegtranConfig& c) {
  if (c.cnn_only || c.transformer == TransformerKind::mha) return 0;
  return effective_modes(c);
}

/// Excludes one mode from every expanded block's gate softmax at inference;
/// the remaining gate weights renormalize to 1.
template <Real T>
KnockoutReport mode_knockout(const SegtranModel<T>& model, std::size_t mode, const std::vector<SyntheticSample>& set) {
  const std::size_t modes = expanded_modes(model.config);
  if (modes < 2) throw ConfigError("mode knockout needs a model with at least 2 modes, this one has " + std::to_string(modes));
  if (mode >= modes) {
    throw UsageError("mode index " + std::to_string(mode) + " out of range for " + std::to_string(modes) + " modes");
  }
  KnockoutReport r;
  r.mode = mode;
  r.before = evaluate(model, set).dice;
  r.after = evaluate(model, set, mode).dice;
  return r;
}

// ---------------------------------------------------------------- parameter count

struct ParamCount {
  std::map<std::string, std::size_t> groups;  // backbone, fpn, transformer, pe, head
  std::size_t total = 0;
  std::size_t mode_params = 0;  // expanded-block modes plus their gates
};

template <Real T>
ParamCount param_count(const ParamStore<T>& params) {
  ParamCount c;
  for (const char* g : {"backbone", "fpn", "transformer", "pe", "head"}) c.groups[g] = 0;
  for (ParamId i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const std::size_t n = params.value(i).size();
    c.groups[name.substr(0, name.find('.'))] += n;
    c.total += n;
    if (name.find(".mode") != std::string::npos || name.find(".gate") != std::string::npos) c.mode_params += n;
  }
  return c;
}

template <Real T>
ParamCount param_count(const SegtranModel<T>& model) {
  return param_count(model.params);
}

// ---------------------------------------------------------------- ablations

struct AblationCell {
  std::string id;
  SegtranConfig config;
};

struct AblationGrid {
  std::string name;
  std::vector<AblationCell> cells;
  std::vector<std::uint64_t> seeds;
};

/// Transformer variants: multi-head with discrete encoding, multi-head,
/// no squeeze, squeeze with one mode, squeeze with expansion.
inline AblationGrid transformer_grid(const SegtranConfig& base, std::vector<std::uint64_t> seeds) {
  AblationGrid g{"transformer", {}, std::move(seeds)};
  auto cell = [&](std::string id, TransformerKind kind, PeKind pe) {
    SegtranConfig c = base;
    c.cnn_only = false;
    c.transformer = kind;
    c.pe = pe;
    g.cells.push_back({std::move(id), c});
  };
  cell("cell_detr", TransformerKind::mha, PeKind::discrete);
  cell("multi_head", TransformerKind::mha, base.pe);
  cell("expand_only", TransformerKind::expand_only, base.pe);
  cell("squeeze_single", TransformerKind::squeeze_single, base.pe);
  cell("squeeze_expand", TransformerKind::squeeze_expand, base.pe);
  return g;
}

inline AblationGrid pe_grid(const SegtranConfig& base, std::vector<std::uint64_t> seeds) {
  AblationGrid g{"pe", {}, std::move(seeds)};
  for (PeKind pe : {PeKind::none, PeKind::discrete, PeKind::fixed, PeKind::learnable}) {
    SegtranConfig c = base;
    c.cnn_only = false;
    c.pe = pe;
    g.cells.push_back({"pe_" + to_string(pe), c});
  }
  return g;
}

inline AblationGrid depth_grid(const SegtranConfig& base, std::vector<std::uint64_t> seeds) {
  AblationGrid g{"layers", {}, std::move(seeds)};
  for (std::size_t l = 1; l <= 4; ++l) {
    SegtranConfig c = base;
    c.cnn_only = false;
    c.layers = l;
    g.cells.push_back({"layers_" + std::to_string(l), c});
  }
  return g;
}

inline AblationGrid make_grid(const std::string& name, const SegtranConfig& base, std::vector<std::uint64_t> seeds) {
  if (name == "transformer" || name == "table1") return transformer_grid(base, std::move(seeds));
  if (name == "pe" || name == "table2") return pe_grid(base, std::move(seeds));
  if (name == "layers" || name == "table3") return depth_grid(base, std::move(seeds));
  throw ConfigError("unknown ablation grid '" + name + "' (transformer|pe|layers)");
}

struct AblationRow {
  std::string cell;
  SegtranConfig config;
  std::uint64_t seed = 0;
  std::vector<double> dice;  // foreground classes 1..K−1; empty on failure
  std::string status;        // "ok" or "failed: <reason>"
};

inline std::string ablation_header(std::size_t classes) {
  std::string h = "cell,transformer,pe,layers,modes,seed";
  for (std::size_t c = 1; c < classes; ++c) h += ",dice_c" + std::to_string(c);
  return h + ",status";
}

inline std::string ablation_line(const AblationRow& r, std::size_t classes) {
  std::string s = r.cell + "," + (r.config.cnn_only ? std::string("none") : to_string(r.config.transformer)) + "," +
                  to_string(r.config.pe) + "," + std::to_string(r.config.layers) + "," +
                  std::to_string(effective_modes(r.config)) + "," + std::to_string(r.seed);
  for (std::size_t c = 1; c < classes; ++c) s += "," + (c - 1 < r.dice.size() ? format_number(r.dice[c - 1]) : "");
  std::string status = r.status;
  std::replace(status.begin(), status.end(), ',', ';');
  std::replace(status.begin(), status.end(), '\n', ' ');
  return s + "," + status;
}

/// Rows in grid order (cell-major, then seed), whatever order they were produced in.
inline std::string ablation_csv(const AblationGrid& grid, std::vector<AblationRow> rows) {
  std::map<std::string, std::size_t> cell_rank;
  for (std::size_t i = 0; i < grid.cells.size(); ++i) cell_rank[grid.cells[i].id] = i;
  std::map<std::uint64_t, std::size_t> seed_rank;
  for (std::size_t i = 0; i < grid.seeds.size(); ++i) seed_rank.emplace(grid.seeds[i], i);
  std::stable_sort(rows.begin(), rows.end(), [&](const AblationRow& a, const AblationRow& b) {
    const auto ka = std::pair(cell_rank[a.cell], seed_rank[a.seed]);
    const auto kb = std::pair(cell_rank[b.cell], seed_rank[b.seed]);
    return ka < kb;
  });
  const std::size_t k = grid.cells.empty() ? 2 : resolved_classes(grid.cells.front().config);
  std::string out = ablation_header(k) + "\n";
  for (const auto& r : rows) out += ablation_line(r, k) + "\n";
  return out;
}

/// Trains one (cell, seed) pair; failures become a status instead of an exception.
inline AblationRow run_ablation_cell(const AblationCell& cell, std::uint64_t seed) {
  AblationRow row{cell.id, cell.config, seed, {}, "ok"};
  row.config.seed = seed;
  try {
    RunSummary s = run_training(row.config);
    row.dice.assign(s.final_eval.dice.begin() + 1, s.final_eval.dice.end());
  } catch (const std::exception& e) {
    row.dice.clear();
    row.status = std::string("failed: ") + e.what();
  }
  return row;
}

inline std::vector<AblationRow> run_ablation(const AblationGrid& grid,
                                       const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  for (const auto& cell : grid.cells) {
    for (std::uint64_t seed : grid.seeds) {
      rows.push_back(run_ablation_cell(cell, seed));
      if (on_row) on_row(rows.back());
    }
  }
  return rows;
}

}  // namespace segtran
