#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "segtran/param_store.hpp"

namespace segtran {

struct AdamWSettings {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

template <Real T>
struct TrainState {
  ParamStore<T> params;
  std::vector<Tensor<T>> first, second;  // moment estimates, one per parameter
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  explicit TrainState(ParamStore<T> p, std::uint64_t s = 0) : params(std::move(p)), seed(s) {
    for (ParamId i = 0; i < params.size(); ++i) {
      first.emplace_back(params.value(i).shape());
      second.emplace_back(params.value(i).shape());
    }
  }
};

/// One decoupled-decay Adam step:
///   p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)
/// with bias-corrected moments m̂, v̂. Arithmetic is done in double and
/// rounded once per element.
template <Real T>
void adamw_step(TrainState<T>& state, const std::vector<Tensor<T>>& grads, const AdamWSettings& s) {
  ParamStore<T>& params = state.params;
  if (grads.size() != params.size()) {
    throw DimensionError("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (ParamId i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape()) {
      throw DimensionError("adamw_step: gradient " + to_string(grads[i].shape()) + " for parameter " +
                           params.name(i) + " of shape " + to_string(params.value(i).shape()));
    }
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for parameter " + params.name(i));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (ParamId i = 0; i < params.size(); ++i) {
    auto p = params.value(i).data();
    auto m = state.first[i].data();
    auto v = state.second[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
      const double vj = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1, vhat = vj / c2;
      double pj = p[j];
      pj -= s.lr * s.weight_decay * pj;
      pj -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
      p[j] = static_cast<T>(pj);
    }
  }
}

}  // namespace segtran
