#pragma once

// Seeded procedural segmentation tasks.
//   rings      : two concentric ellipses, disc (1) around cup (2), K = 3
//   blobs      : one to three random ellipses (1), K = 2
//   corner_cue : a centered square labeled 1 or 2, where the label is decided
//                only by a 4×4 checker marker in one image corner, K = 3

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "segtran/config.hpp"
#include "segtran/init.hpp"
#include "segtran/tensor.hpp"

namespace segtran {

struct LabelMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w) : height(h), width(w), labels(h * w, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

struct SyntheticSample {
  Tensor<double> image;  // [1×H×W], values in [0, 1]
  LabelMask mask;
  std::uint64_t seed = 0;
  Task task = Task::rings;
  // corner_cue only: the cued class and the marker corner (0 TL, 1 TR, 2 BL, 3 BR).
  int cue_class = 0;
  int cue_corner = -1;
};

inline constexpr std::size_t kMarkerSize = 4;

namespace detail {

inline void check_sample_extents(std::size_t h, std::size_t w) {
  if (h == 0 || h % 16 != 0) throw ConfigError("sample height " + std::to_string(h) + " is not divisible by 16");
  if (w == 0 || w % 16 != 0) throw ConfigError("sample width " + std::to_string(w) + " is not divisible by 16");
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

struct Ellipse {
  double cx, cy, rx, ry, cos_t, sin_t;

  // 1 on the boundary, 0 at the center.
  double radius(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = dx * cos_t + dy * sin_t;
    const double v = -dx * sin_t + dy * cos_t;
    return std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
  }
};

inline Ellipse random_ellipse(Rng& rng, double cx, double cy, double rx, double ry) {
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  const double t = angle(rng);
  return {cx, cy, rx, ry, std::cos(t), std::sin(t)};
}

inline SyntheticSample make_rings(std::uint64_t seed, std::size_t h, std::size_t w) {
  Rng rng(mix_seed(seed, 1));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  const double cx = wd * between(0.38, 0.62), cy = hd * between(0.38, 0.62);
  const Ellipse outer = random_ellipse(rng, cx, cy, wd * between(0.22, 0.34), hd * between(0.22, 0.34));
  const double cup_ratio = between(0.45, 0.6);
  const double ramp_angle = between(0.0, 2.0 * std::numbers::pi);
  const double ramp_x = std::cos(ramp_angle), ramp_y = std::sin(ramp_angle);
  std::normal_distribution<double> noise(0.0, 0.04);

  SyntheticSample s{Tensor<double>(Shape{1, h, w}), LabelMask(h, w), seed, Task::rings};
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
      const double rad = outer.radius(x, y);
      double v;
      if (rad < cup_ratio) {
        s.mask.at(r, c) = 2;
        v = 0.82 + 0.12 * (1.0 - rad / cup_ratio);
      } else if (rad < 1.0) {
        s.mask.at(r, c) = 1;
        v = 0.45 + 0.12 * (1.0 - rad);
      } else {
        v = 0.18 + 0.1 * ((x - cx) * ramp_x + (y - cy) * ramp_y) / std::max(hd, wd);
      }
      s.image.at(0, r, c) = clamp01(v + noise(rng));
    }
  }
  return s;
}

inline SyntheticSample make_blobs(std::uint64_t seed, std::size_t h, std::size_t w) {
  Rng rng(mix_seed(seed, 2));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  const int count = 1 + static_cast<int>(u01(rng) * 3.0 * 0.999999);
  std::vector<Ellipse> blobs;
  for (int i = 0; i < count; ++i) {
    const double cx = wd * between(0.2, 0.8), cy = hd * between(0.2, 0.8);
    blobs.push_back(random_ellipse(rng, cx, cy, wd * between(0.08, 0.18), hd * between(0.08, 0.18)));
  }
  const double fx = between(1.0, 3.0), fy = between(1.0, 3.0), phase = between(0.0, 6.28);
  std::normal_distribution<double> noise(0.0, 0.05);

  SyntheticSample s{Tensor<double>(Shape{1, h, w}), LabelMask(h, w), seed, Task::blobs};
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
      double best = 2.0;
      for (const Ellipse& e : blobs) best = std::min(best, e.radius(x, y));
      double v;
      if (best < 1.0) {
        s.mask.at(r, c) = 1;
        v = 0.65 + 0.15 * (1.0 - best);
      } else {
        v = 0.22 + 0.06 * std::sin(fx * x / wd * 6.28 + fy * y / hd * 6.28 + phase);
      }
      s.image.at(0, r, c) = clamp01(v + noise(rng));
    }
  }
  return s;
}

}  // namespace detail

/// corner_cue with an explicit class and corner; noise depends only on seed,
/// so two renders differing in cue_class differ only in the marker pixels and
/// the square's label.
inline SyntheticSample render_corner_cue(std::uint64_t seed, std::size_t h, std::size_t w, int cue_class,
                                         int corner) {
  detail::check_sample_extents(h, w);
  if (cue_class != 1 && cue_class != 2) throw UsageError("corner_cue class must be 1 or 2");
  if (corner < 0 || corner > 3) throw UsageError("corner_cue corner must be in 0..3");
  Rng rng(mix_seed(seed, 4));
  std::normal_distribution<double> noise(0.0, 0.04);
  SyntheticSample s{Tensor<double>(Shape{1, h, w}), LabelMask(h, w), seed, Task::corner_cue, cue_class, corner};
  const std::size_t r0 = 3 * h / 8, r1 = 5 * h / 8, c0 = 3 * w / 8, c1 = 5 * w / 8;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const bool inside = r >= r0 && r < r1 && c >= c0 && c < c1;
      if (inside) s.mask.at(r, c) = static_cast<std::uint8_t>(cue_class);
      s.image.at(0, r, c) = detail::clamp01((inside ? 0.6 : 0.2) + noise(rng));
    }
  }
  const std::size_t mr = (corner / 2 == 0) ? 0 : h - kMarkerSize;
  const std::size_t mc = (corner % 2 == 0) ? 0 : w - kMarkerSize;
  for (std::size_t i = 0; i < kMarkerSize; ++i) {
    for (std::size_t j = 0; j < kMarkerSize; ++j) {
      const double checker = static_cast<double>((i + j) % 2);
      s.image.at(0, mr + i, mc + j) = cue_class == 1 ? checker : 1.0 - checker;
    }
  }
  return s;
}

inline SyntheticSample gen_synthetic(std::uint64_t seed, Task task, std::size_t h, std::size_t w, std::size_t classes) {
  detail::check_sample_extents(h, w);
  if (classes != task_classes(task)) {
    throw ConfigError("task " + to_string(task) + " has " + std::to_string(task_classes(task)) +
                      " classes, requested " + std::to_string(classes));
  }
  switch (task) {
    case Task::rings:
      return detail::make_rings(seed, h, w);
    case Task::blobs:
      return detail::make_blobs(seed, h, w);
    case Task::corner_cue: {
      Rng rng(mix_seed(seed, 3));
      std::uniform_int_distribution<int> cls(1, 2), corner(0, 3);
      const int c = cls(rng);
      return render_corner_cue(seed, h, w, c, corner(rng));
    }
  }
  throw ConfigError("unknown task");
}

}  // namespace segtran
