#pragma once

#include <string>
#include <vector>

#include "segtran/data.hpp"
#include "segtran/ops.hpp"
#include "segtran/param_store.hpp"

namespace segtran {

namespace detail {

template <Real T>
void check_logits_mask(const Var<T>& logits, const LabelMask& mask, const char* op) {
  const Shape& s = logits.shape();
  if (s.size() != 3 || s[1] != mask.height || s[2] != mask.width) {
    throw DimensionError(std::string(op) + ": logits " + to_string(s) + " do not match a " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width) + " mask");
  }
}

}  // namespace detail

/// [K×H×W] indicator of the mask labels.
template <Real T>
Tensor<T> one_hot(const LabelMask& mask, std::size_t classes) {
  Tensor<T> out(Shape{classes, mask.height, mask.width});
  const std::size_t plane = mask.size();
  for (std::size_t i = 0; i < plane; ++i) {
    const std::size_t label = mask.labels[i];
    if (label >= classes) {
      throw UsageError("mask label " + std::to_string(label) + " is not below the class count " +
                       std::to_string(classes));
    }
    out[label * plane + i] = T(1);
  }
  return out;
}

/// Pixel-averaged cross-entropy.
template <Real T>
Var<T> ce_loss(const Var<T>& logits, const LabelMask& mask) {
  detail::check_logits_mask(logits, mask, "ce_loss");
  Tape<T>& tape = logits.tape();
  Var<T> target = tape.constant(one_hot<T>(mask, logits.dim(0)));
  return scale(sum(mul(log_softmax(logits, 0), target)), T(-1) / static_cast<T>(mask.size()));
}

/// 1 − mean soft dice over the foreground classes, smoothing 1.
template <Real T>
Var<T> dice_loss(const Var<T>& logits, const LabelMask& mask) {
  detail::check_logits_mask(logits, mask, "dice_loss");
  const std::size_t k = logits.dim(0);
  if (k < 2) throw ConfigError("dice loss needs at least one foreground class");
  Tape<T>& tape = logits.tape();
  const std::size_t n = mask.size();
  Tensor<T> target = one_hot<T>(mask, k);
  Tensor<T> target_sum(Shape{k});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < n; ++i) target_sum[c] += target[c * n + i];
  Tensor<T> foreground(Shape{k}, T(1));
  foreground[0] = T(0);

  Var<T> probs = reshape(softmax(logits, 0), Shape{k, n});
  Var<T> g = tape.constant(target.reshaped(Shape{k, n}));
  Var<T> inter = row_sum(mul(probs, g));
  Var<T> numer = add_scalar(scale(inter, T(2)), T(1));
  Var<T> denom = add_scalar(add(row_sum(probs), tape.constant(std::move(target_sum))), T(1));
  Var<T> dice = mul(div(numer, denom), tape.constant(std::move(foreground)));
  return add_scalar(scale(sum(dice), T(-1) / static_cast<T>(k - 1)), T(1));
}

template <Real T>
struct LossTerms {
  Var<T> ce, dice, total;
};

template <Real T>
LossTerms<T> loss_terms(const Var<T>& logits, const LabelMask& mask) {
  Var<T> ce = ce_loss(logits, mask);
  Var<T> dice = dice_loss(logits, mask);
  return {ce, dice, scale(add(ce, dice), T(0.5))};
}

template <Real T>
Var<T> combined_loss(const Var<T>& logits, const LabelMask& mask) {
  return loss_terms(logits, mask).total;
}

/// Per-pixel class of the largest logit; ties go to the lower class.
template <Real T>
LabelMask argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 3) throw DimensionError("argmax_labels expects [K×H×W], got " + to_string(logits.shape()));
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2), n = h * w;
  LabelMask out(h, w);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[c * n + i] > logits[best * n + i]) best = c;
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Hard dice per class 0..K−1; a class absent from both masks scores 1.
inline std::vector<double> dice_score(const LabelMask& pred, const LabelMask& gt, std::size_t classes) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("dice_score: masks of different extents");
  }
  std::vector<std::size_t> inter(classes, 0), p(classes, 0), g(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t a = pred.labels[i], b = gt.labels[i];
    if (a < classes) ++p[a];
    if (b < classes) ++g[b];
    if (a == b && a < classes) ++inter[a];
  }
  std::vector<double> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    out[c] = (p[c] + g[c] == 0) ? 1.0 : 2.0 * static_cast<double>(inter[c]) / static_cast<double>(p[c] + g[c]);
  }
  return out;
}

}  // namespace segtran
