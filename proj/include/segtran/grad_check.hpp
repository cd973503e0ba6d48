#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "segtran/param_store.hpp"

namespace segtran {

struct GradCheckEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0;
  double mean_rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double worst = 0;
    for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
    return worst;
  }
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

// |a − b| / max(|a|, |b|, 1e-12)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

using ScalarFunction = std::function<Var<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences, parameter by parameter. Double precision only.
inline GradCheckReport grad_check(const ScalarFunction& f, ParamStore<double>& params,
                                  double eps = 1e-5) {
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> graph(params, true);
    Var<double> out = f(graph);
    if (out.size() != 1) throw UsageError("grad_check needs a scalar-valued function");
    graph.tape().backward(out);
    analytic = graph.param_gradients();
  }

  auto evaluate = [&](ParamId id) {
    Graph<double> graph(params, false);
    const double v = f(graph).value()[0];
    if (!std::isfinite(v)) throw NumericError("non-finite loss while probing " + params.name(id));
    return v;
  };

  GradCheckReport report;
  for (ParamId id = 0; id < params.size(); ++id) {
    GradCheckEntry entry{params.name(id), params.value(id).size(), 0.0, 0.0};
    Tensor<double>& value = params.value(id);
    double total = 0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = evaluate(id);
      value[i] = saved - eps;
      const double down = evaluate(id);
      value[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double err = relative_error(analytic[id][i], numeric);
      entry.max_rel_error = std::max(entry.max_rel_error, err);
      total += err;
    }
    entry.mean_rel_error = total / static_cast<double>(value.size());
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace segtran
