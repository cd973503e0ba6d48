// segtran: train, evaluate and probe models on the synthetic tasks.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "segtran/grad_suite.hpp"
#include "segtran/segtran.hpp"

namespace fs = std::filesystem;
using namespace segtran;

namespace {

struct ConfigFlags {
  std::string file;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> sets;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.file, "key = value config file")->check(CLI::ExistingFile);
  const std::pair<const char*, const char*> keyed[] = {
      {"task", "task"},       {"size", "image_size"},   {"layers", "layers"},   {"modes", "modes"},
      {"codebook", "codebook"}, {"heads", "heads"},     {"transformer", "transformer"},
      {"pe", "pe"},           {"iters", "iters"},       {"batch", "batch"},     {"lr", "lr"},
      {"seed", "seed"},       {"threads", "threads"},   {"eval-every", "eval_every"},
      {"holdout", "holdout"}, {"precision", "precision"}, {"channels", "channels"}};
  for (const auto& [flag, key] : keyed) {
    const std::string k = key;
    app->add_option_function<std::string>(
        std::string("--") + flag, [&f, k](const std::string& v) { f.overrides.emplace_back(k, v); },
        "config " + k);
  }
  app->add_flag_callback("--cnn-only", [&f] { f.overrides.emplace_back("cnn_only", "true"); },
                         "drop positional encoding and transformer");
  app->add_flag_callback("--no-layernorm", [&f] { f.overrides.emplace_back("layernorm", "false"); },
                         "transformer blocks without residual layer norms");
  app->add_flag_callback("--no-timing", [&f] { f.overrides.emplace_back("timing", "false"); },
                         "write 0 in the seconds column");
  app->add_option("--set", f.sets, "extra key=value override, repeatable");
}

// File (or a fallback file), then flags, then --set.
SegtranConfig resolve_config(const ConfigFlags& f, const fs::path& fallback = {}) {
  SegtranConfig cfg;
  if (!f.file.empty()) {
    cfg = parse_config(read_file(f.file));
  } else if (!fallback.empty() && fs::exists(fallback)) {
    cfg = parse_config(read_file(fallback));
  }
  for (const auto& [k, v] : f.overrides) set_config_value(cfg, k, v);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, detail::trim(std::string_view(s).substr(0, eq)), std::string_view(s).substr(eq + 1));
  }
  validate(cfg);
  return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    seeds.push_back(detail::parse_uint("seeds", detail::trim(rest.substr(0, comma))));
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
  }
  if (seeds.empty()) throw ConfigError("--seeds needs at least one seed");
  return seeds;
}

fs::path prepare_out(const std::string& out) {
  fs::path p(out);
  fs::create_directories(p);
  return p;
}

template <Real T>
SegtranModel<T> model_for(const SegtranConfig& cfg, const std::string& ckpt) {
  if (ckpt.empty()) return build_model<T>(cfg);
  return load_model<T>(cfg, ckpt);
}

template <Real T>
int run_eval(const SegtranConfig& cfg, const std::string& ckpt, const fs::path& out) {
  auto model = model_for<T>(cfg, ckpt);
  EvalResult r = evaluate(model, holdout_set(cfg));
  std::string csv = "class,dice\n";
  for (std::size_t c = 0; c < r.dice.size(); ++c) csv += std::to_string(c) + "," + format_number(r.dice[c]) + "\n";
  csv += "mean_foreground," + format_number(r.mean_foreground()) + "\n";
  write_file(out / "eval.csv", csv);
  std::cout << csv;
  return 0;
}

template <Real T>
int run_erf(const SegtranConfig& cfg, const std::string& ckpt, const fs::path& out, double tau, int cls,
            std::uint64_t sample) {
  auto model = model_for<T>(cfg, ckpt);
  const SyntheticSample s = config_sample(cfg, holdout_seed(sample));
  std::optional<std::size_t> class_index;
  if (cls >= 0) class_index = static_cast<std::size_t>(cls);
  ErfReport r = erf_probe(model, model_input<T>(s, cfg.in_channels), class_index, tau);
  write_file(out / "erf.csv", erf_csv(r));
  write_file(out / "erf.pgm", erf_pgm(r.map));
  std::cout << erf_csv(r);
  return 0;
}

template <Real T>
int run_knockout(const SegtranConfig& cfg, const std::string& ckpt, const fs::path& out, int only) {
  auto model = model_for<T>(cfg, ckpt);
  const auto set = holdout_set(cfg);
  const std::size_t k = model.classes();
  std::string csv = "mode";
  for (std::size_t c = 1; c < k; ++c) csv += ",before_c" + std::to_string(c);
  for (std::size_t c = 1; c < k; ++c) csv += ",after_c" + std::to_string(c);
  csv += ",drop\n";
  std::vector<std::size_t> targets;
  if (only >= 0) {
    targets.push_back(static_cast<std::size_t>(only));
  } else {
    for (std::size_t m = 0; m < std::max<std::size_t>(expanded_modes(cfg), 1); ++m) targets.push_back(m);
  }
  for (std::size_t m : targets) {
    KnockoutReport r = mode_knockout(model, m, set);
    csv += std::to_string(r.mode);
    for (std::size_t c = 1; c < k; ++c) csv += "," + format_number(r.before[c]);
    for (std::size_t c = 1; c < k; ++c) csv += "," + format_number(r.after[c]);
    csv += "," + format_number(r.drop()) + "\n";
  }
  write_file(out / "knockout.csv", csv);
  std::cout << csv;
  return 0;
}

template <Real T>
int run_params(const SegtranConfig& cfg, const fs::path& out) {
  auto model = build_model<T>(cfg);
  ParamCount pc = param_count(model);
  std::string csv = "group,count\n";
  for (const char* g : {"backbone", "fpn", "transformer", "pe", "head"}) {
    csv += std::string(g) + "," + std::to_string(pc.groups[g]) + "\n";
  }
  csv += "mode_params," + std::to_string(pc.mode_params) + "\n";
  csv += "total," + std::to_string(pc.total) + "\n";
  write_file(out / "params.csv", csv);
  std::cout << csv;
  return 0;
}

int run_gradcheck(const fs::path& out, bool quiet) {
  std::string csv = "check,parameter,count,max_rel_error,mean_rel_error\n";
  double worst = 0;
  for (const GradCase& c : gradient_cases()) {
    GradCheckReport r = c.run();
    for (const auto& e : r.entries) {
      csv += c.name + "," + e.name + "," + std::to_string(e.count) + "," + format_number(e.max_rel_error) + "," +
             format_number(e.mean_rel_error) + "\n";
    }
    worst = std::max(worst, r.max_rel_error());
    if (!quiet) std::printf("%-28s max rel error %.3e %s\n", c.name.c_str(), r.max_rel_error(), r.passed(1e-4) ? "ok" : "FAIL");
  }
  write_file(out / "gradcheck.csv", csv);
  std::printf("worst relative error %.3e\n", worst);
  return worst < 1e-4 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Squeeze-and-expansion segmentation transformer on synthetic tasks"};
  app.require_subcommand(1);

  std::string out, ckpt, grid = "transformer", seeds = "0,1,2";
  double tau = 0.01;
  int cls = -1, mode = -1;
  std::uint64_t sample = 0;
  bool quiet = false;

  ConfigFlags train_f, eval_f, erf_f, ablate_f, knock_f, params_f;

  auto* train = app.add_subcommand("train", "train a model; writes metrics.csv, final.ckpt, best.ckpt");
  add_config_flags(train, train_f);
  train->add_option("--out", out, "output directory")->required();
  train->add_flag("--quiet", quiet, "no progress output");

  auto* eval = app.add_subcommand("eval", "held-out dice of a checkpoint; writes eval.csv");
  add_config_flags(eval, eval_f);
  eval->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "output directory")->required();

  auto* erf = app.add_subcommand("erf", "effective receptive field at the image center; writes erf.csv, erf.pgm");
  add_config_flags(erf, erf_f);
  erf->add_option("--ckpt", ckpt, "checkpoint (default: freshly initialized model)")->check(CLI::ExistingFile);
  erf->add_option("--out", out, "output directory")->required();
  erf->add_option("--tau", tau, "threshold as a fraction of the peak")->check(CLI::Range(0.0, 1.0));
  erf->add_option("--class", cls, "class logit to probe (default: predicted class)");
  erf->add_option("--sample", sample, "held-out sample index");

  auto* ablate = app.add_subcommand("ablate", "ablation grid; writes ablation_<grid>.csv");
  add_config_flags(ablate, ablate_f);
  ablate->add_option("--grid", grid, "transformer | pe | layers")
      ->check(CLI::IsMember({"transformer", "pe", "layers", "table1", "table2", "table3"}));
  ablate->add_option("--seeds", seeds, "comma-separated seeds");
  ablate->add_option("--out", out, "output directory")->required();

  auto* knock = app.add_subcommand("knockout", "per-mode knockout dice; writes knockout.csv");
  add_config_flags(knock, knock_f);
  knock->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  knock->add_option("--mode", mode, "single mode (default: each in turn)");
  knock->add_option("--out", out, "output directory")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference suite; writes gradcheck.csv");
  gradcheck->add_option("--out", out, "output directory")->required();
  gradcheck->add_flag("--quiet", quiet, "only the summary line");

  auto* params = app.add_subcommand("params", "parameter counts by group; writes params.csv");
  add_config_flags(params, params_f);
  params->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const fs::path dir = prepare_out(out);
    const fs::path ckpt_config = ckpt.empty() ? fs::path() : fs::path(ckpt).parent_path() / "config.txt";
    auto dispatch = [](const SegtranConfig& cfg, auto&& fn) {
      return cfg.precision == Precision::double_precision ? fn(double{}) : fn(float{});
    };

    if (*train) {
      SegtranConfig cfg = resolve_config(train_f);
      RunSummary s = run_training(cfg, TrainOptions{dir, !quiet});
      std::printf("final mean foreground dice %.4f (best %.4f at iteration %zu)\n", s.final_eval.mean_foreground(),
                  s.best_dice, s.best_iter);
      return 0;
    }
    if (*eval) {
      SegtranConfig cfg = resolve_config(eval_f, ckpt_config);
      return dispatch(cfg, [&](auto t) { return run_eval<decltype(t)>(cfg, ckpt, dir); });
    }
    if (*erf) {
      SegtranConfig cfg = resolve_config(erf_f, ckpt_config);
      return dispatch(cfg, [&](auto t) { return run_erf<decltype(t)>(cfg, ckpt, dir, tau, cls, sample); });
    }
    if (*knock) {
      SegtranConfig cfg = resolve_config(knock_f, ckpt_config);
      return dispatch(cfg, [&](auto t) { return run_knockout<decltype(t)>(cfg, ckpt, dir, mode); });
    }
    if (*params) {
      SegtranConfig cfg = resolve_config(params_f);
      return dispatch(cfg, [&](auto t) { return run_params<decltype(t)>(cfg, dir); });
    }
    if (*ablate) {
      SegtranConfig base = resolve_config(ablate_f);
      AblationGrid g = make_grid(grid, base, parse_seeds(seeds));
      const std::size_t k = resolved_classes(base);
      auto rows = run_ablation(g, [&](const AblationRow& r) { std::cout << ablation_line(r, k) << std::endl; });
      write_file(dir / ("ablation_" + g.name + ".csv"), ablation_csv(g, rows));
      return 0;
    }
    if (*gradcheck) return run_gradcheck(dir, quiet);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
