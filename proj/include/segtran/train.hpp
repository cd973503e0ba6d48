#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "segtran/checkpoint.hpp"
#include "segtran/losses.hpp"
#include "segtran/optim.hpp"
#include "segtran/segnet.hpp"

namespace segtran {

// ---------------------------------------------------------------- data streams

// Training draws from seeds with the top bit clear, the held-out set from
// seeds with it set, so the two never meet.
inline constexpr std::uint64_t kHoldoutBit = 1ull << 63;

inline std::uint64_t training_seed(const SegtranConfig& c, std::uint64_t index) {
  return mix_seed(c.seed ^ 0x5EEDDA7A5EEDDA7Aull, index) & ~kHoldoutBit;
}

inline std::uint64_t holdout_seed(std::uint64_t index) { return kHoldoutBit | index; }

inline SyntheticSample config_sample(const SegtranConfig& c, std::uint64_t seed) {
  return gen_synthetic(seed, c.task, c.image_size, c.image_size, resolved_classes(c));
}

inline std::vector<SyntheticSample> holdout_set(const SegtranConfig& c) {
  std::vector<SyntheticSample> out;
  out.reserve(c.holdout);
  for (std::size_t i = 0; i < c.holdout; ++i) out.push_back(config_sample(c, holdout_seed(i)));
  return out;
}

/// Sample image in model precision, replicated when the model takes RGB.
template <Real T>
Tensor<T> model_input(const SyntheticSample& s, std::size_t in_channels) {
  Tensor<T> gray = s.image.cast<T>();
  if (in_channels == 1) return gray;
  const std::size_t plane = gray.size();
  Tensor<T> out(Shape{in_channels, s.image.dim(1), s.image.dim(2)});
  for (std::size_t c = 0; c < in_channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = gray[i];
  return out;
}

inline std::size_t resolved_threads(const SegtranConfig& c) {
  if (c.threads > 0) return c.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n); worker t takes i ≡ t (mod workers). Results
/// must be written to per-index slots so the outcome is schedule independent.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- evaluation

struct EvalResult {
  std::vector<double> dice;  // per class 0..K−1, averaged over samples
  double loss_ce = 0, loss_dice = 0, loss_total = 0;

  double mean_foreground() const {
    double total = 0;
    for (std::size_t c = 1; c < dice.size(); ++c) total += dice[c];
    return dice.size() > 1 ? total / static_cast<double>(dice.size() - 1) : 0.0;
  }
};

template <Real T>
struct Prediction {
  Tensor<T> logits;
  LabelMask labels;
};

template <Real T>
Prediction<T> predict(const SegtranModel<T>& model, const ParamStore<T>& params, const SyntheticSample& s,
                      std::optional<std::size_t> knockout = std::nullopt) {
  Graph<T> g(params, false);
  g.hooks().knockout_mode = knockout;
  Var<T> logits = segtran_forward(g, g.input(model_input<T>(s, model.config.in_channels)), model);
  return {logits.value(), argmax_labels(logits.value())};
}

template <Real T>
EvalResult evaluate(const SegtranModel<T>& model, const ParamStore<T>& params,
                    const std::vector<SyntheticSample>& set, std::optional<std::size_t> knockout = std::nullopt) {
  const std::size_t k = model.classes();
  std::vector<std::vector<double>> dice(set.size());
  std::vector<std::array<double, 3>> losses(set.size());
  parallel_for(set.size(), resolved_threads(model.config), [&](std::size_t i) {
    Graph<T> g(params, false);
    g.hooks().knockout_mode = knockout;
    Var<T> logits = segtran_forward(g, g.input(model_input<T>(set[i], model.config.in_channels)), model);
    LossTerms<T> terms = loss_terms(logits, set[i].mask);
    losses[i] = {static_cast<double>(terms.ce.value()[0]), static_cast<double>(terms.dice.value()[0]),
                 static_cast<double>(terms.total.value()[0])};
    dice[i] = dice_score(argmax_labels(logits.value()), set[i].mask, k);
  });
  EvalResult r;
  r.dice.assign(k, 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) r.dice[c] += dice[i][c];
    r.loss_ce += losses[i][0];
    r.loss_dice += losses[i][1];
    r.loss_total += losses[i][2];
  }
  const double n = static_cast<double>(std::max<std::size_t>(set.size(), 1));
  for (double& d : r.dice) d /= n;
  r.loss_ce /= n;
  r.loss_dice /= n;
  r.loss_total /= n;
  return r;
}

template <Real T>
EvalResult evaluate(const SegtranModel<T>& model, const std::vector<SyntheticSample>& set,
                    std::optional<std::size_t> knockout = std::nullopt) {
  return evaluate(model, model.params, set, knockout);
}

// ---------------------------------------------------------------- metrics

struct MetricsRow {
  std::size_t iter = 0;
  double loss_ce = 0, loss_dice = 0, loss_total = 0;  // training losses since the previous row
  std::vector<double> dice;                           // held-out dice, foreground classes 1..K−1
  double seconds = 0;
};

inline std::string metrics_header(std::size_t classes) {
  std::string h = "iter,loss_ce,loss_dice,loss_total";
  for (std::size_t c = 1; c < classes; ++c) h += ",dice_c" + std::to_string(c);
  return h + ",seconds";
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.iter) + "," + format_number(r.loss_ce) + "," + format_number(r.loss_dice) +
                  "," + format_number(r.loss_total);
  for (double d : r.dice) s += "," + format_number(d);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", r.seconds);
  return s + "," + buf;
}

// ---------------------------------------------------------------- training

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;
  bool verbose = false;
};

template <Real T>
struct TrainResult {
  ParamStore<T> best_params;
  double best_dice = -1;
  std::size_t best_iter = 0;
  std::vector<MetricsRow> rows;
  std::vector<double> loss_trace;  // mean batch loss per iteration
  EvalResult final_eval;
};

template <Real T>
struct BatchOutcome {
  std::vector<Tensor<T>> grads;
  double ce = 0, dice = 0, total = 0;
};

/// Per-sample forward/backward on separate tapes, then a fixed-order sum.
template <Real T>
BatchOutcome<T> batch_gradients(const SegtranModel<T>& model, const ParamStore<T>& params,
                                const std::vector<SyntheticSample>& batch, std::size_t threads) {
  const std::size_t b = batch.size();
  std::vector<std::vector<Tensor<T>>> grads(b);
  std::vector<std::array<T, 3>> losses(b);
  parallel_for(b, threads, [&](std::size_t i) {
    Graph<T> g(params, true);
    Var<T> logits = segtran_forward(g, g.input(model_input<T>(batch[i], model.config.in_channels)), model);
    LossTerms<T> terms = loss_terms(logits, batch[i].mask);
    losses[i] = {terms.ce.value()[0], terms.dice.value()[0], terms.total.value()[0]};
    if (!std::isfinite(static_cast<double>(losses[i][2]))) return;
    g.tape().backward(terms.total);
    grads[i] = g.param_gradients();
  });
  BatchOutcome<T> out;
  for (std::size_t i = 0; i < b; ++i) {
    out.ce += static_cast<double>(losses[i][0]) / static_cast<double>(b);
    out.dice += static_cast<double>(losses[i][1]) / static_cast<double>(b);
    out.total += static_cast<double>(losses[i][2]) / static_cast<double>(b);
  }
  if (!std::isfinite(out.total)) return out;
  out.grads = std::move(grads[0]);
  for (std::size_t i = 1; i < b; ++i) {
    for (std::size_t p = 0; p < out.grads.size(); ++p) {
      auto acc = out.grads[p].data();
      const auto add = grads[i][p].data();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += add[j];
    }
  }
  const T inv = T(1) / static_cast<T>(b);
  for (auto& gt : out.grads)
    for (T& v : gt.data()) v *= inv;
  return out;
}

/// Seeded loop: batch → forward → combined loss → backward → AdamW, with a
/// held-out evaluation every eval_every iterations and after the last one.
/// On return model.params holds the final weights. With an output directory,
/// writes config.txt, metrics.csv, final.ckpt and best.ckpt; a non-finite
/// loss writes last.ckpt and diagnostic.txt and throws NumericError.
template <Real T>
TrainResult<T> train_model(SegtranModel<T>& model, const TrainOptions& opts = {}) {
  const SegtranConfig& cfg = model.config;
  validate(cfg);
  const std::size_t k = model.classes();
  const std::size_t threads = resolved_threads(cfg);
  const auto holdout = holdout_set(cfg);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!cfg.timing) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  std::ofstream metrics;
  const auto& dir = opts.out_dir;
  if (dir) {
    std::filesystem::create_directories(*dir);
    write_file(*dir / "config.txt", format_config(cfg));
    metrics.open(*dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw Error("cannot open " + (*dir / "metrics.csv").string());
    metrics << metrics_header(k) << "\n";
    metrics.flush();
  }

  if (opts.verbose) std::clog << metrics_header(k) << "\n";
  TrainState<T> state(std::move(model.params), cfg.seed);
  const AdamWSettings adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps};
  TrainResult<T> result;
  result.best_params = state.params;

  auto diverge = [&](std::size_t iter, const std::string& why) {
    if (dir) {
      write_file(*dir / "last.ckpt", save_checkpoint(state.params));
      write_file(*dir / "diagnostic.txt", "iteration " + std::to_string(iter) + "\n" + why + "\n");
    }
    model.params = std::move(state.params);
    throw NumericError("training diverged at iteration " + std::to_string(iter) + ": " + why);
  };

  double win_ce = 0, win_dice = 0, win_total = 0;
  std::size_t win_n = 0;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    std::vector<SyntheticSample> batch;
    batch.reserve(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(config_sample(cfg, training_seed(cfg, it * cfg.batch + b)));
    BatchOutcome<T> out = batch_gradients(model, state.params, batch, threads);
    if (!std::isfinite(out.total)) {
      diverge(it + 1, "non-finite loss (ce " + format_number(out.ce) + ", dice " + format_number(out.dice) + ")");
    }
    try {
      adamw_step(state, out.grads, adam);
    } catch (const NumericError& e) {
      diverge(it + 1, e.what());
    }
    result.loss_trace.push_back(out.total);
    win_ce += out.ce;
    win_dice += out.dice;
    win_total += out.total;
    ++win_n;

    const std::size_t done = it + 1;
    if (done % cfg.eval_every == 0 || done == cfg.iters) {
      EvalResult ev = evaluate(model, state.params, holdout);
      MetricsRow row{done, win_ce / win_n, win_dice / win_n, win_total / win_n,
                     std::vector<double>(ev.dice.begin() + 1, ev.dice.end()), elapsed()};
      win_ce = win_dice = win_total = 0;
      win_n = 0;
      if (ev.mean_foreground() > result.best_dice) {
        result.best_dice = ev.mean_foreground();
        result.best_iter = done;
        result.best_params = state.params;
      }
      if (metrics.is_open()) {
        metrics << format_metrics_row(row) << "\n";
        metrics.flush();
      }
      if (opts.verbose) std::clog << format_metrics_row(row) << "\n";
      result.rows.push_back(std::move(row));
      if (done == cfg.iters) result.final_eval = std::move(ev);
    }
  }
  if (cfg.iters == 0) result.final_eval = evaluate(model, state.params, holdout);
  model.params = std::move(state.params);
  if (dir) {
    write_file(*dir / "final.ckpt", save_checkpoint(model.params));
    write_file(*dir / "best.ckpt", save_checkpoint(result.best_params));
  }
  return result;
}

/// Precision-independent summary of a run.
struct RunSummary {
  std::vector<MetricsRow> rows;
  EvalResult final_eval;
  double best_dice = -1;
  std::size_t best_iter = 0;
};

template <Real T>
RunSummary summarize(const TrainResult<T>& r) {
  return {r.rows, r.final_eval, r.best_dice, r.best_iter};
}

inline RunSummary run_training(const SegtranConfig& cfg, const TrainOptions& opts = {}) {
  if (cfg.precision == Precision::double_precision) {
    auto model = build_model<double>(cfg);
    return summarize(train_model(model, opts));
  }
  auto model = build_model<float>(cfg);
  return summarize(train_model(model, opts));
}

/// Loads a checkpoint written for `cfg` into a freshly built model.
template <Real T>
SegtranModel<T> load_model(const SegtranConfig& cfg, const std::filesystem::path& ckpt) {
  SegtranModel<T> model = build_model<T>(cfg);
  assign_params(model.params, load_checkpoint<T>(read_file(ckpt)));
  return model;
}

}  // namespace segtran
