#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>

#include "segtran/errors.hpp"
#include "segtran/positional_encoding.hpp"

namespace segtran {

enum class Task { rings, blobs, corner_cue };
enum class TransformerKind { squeeze_expand, mha, expand_only, squeeze_single };
enum class Precision { single, double_precision };

/// Architecture and training hyperparameters. Everything a run emits is a
/// function of this record.
struct SegtranConfig {
  Task task = Task::rings;
  std::size_t image_size = 64;
  std::size_t classes = 0;  // 0 selects the task's own class count
  std::size_t in_channels = 1;

  std::array<std::size_t, 4> channels{16, 32, 64, 64};
  TransformerKind transformer = TransformerKind::squeeze_expand;
  std::size_t layers = 3;
  std::size_t modes = 4;
  std::size_t codebook = 16;
  std::size_t heads = 4;
  PeKind pe = PeKind::learnable;
  bool cnn_only = false;
  bool layer_norm = true;

  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  std::size_t batch = 8;
  std::size_t iters = 2000;
  std::size_t eval_every = 100;
  std::size_t holdout = 64;
  std::uint64_t seed = 0;
  Precision precision = Precision::single;
  std::size_t threads = 0;  // 0: one per hardware thread
  bool timing = true;

  std::size_t width() const { return channels[3]; }
};

inline std::size_t task_classes(Task task) { return task == Task::blobs ? 2 : 3; }

inline std::size_t resolved_classes(const SegtranConfig& c) {
  return c.classes == 0 ? task_classes(c.task) : c.classes;
}

// Modes actually instantiated per expanded block.
inline std::size_t effective_modes(const SegtranConfig& c) {
  return c.transformer == TransformerKind::squeeze_single ? 1 : c.modes;
}

// ---------------------------------------------------------------- enum text

inline std::string to_string(Task t) {
  switch (t) {
    case Task::rings: return "rings";
    case Task::blobs: return "blobs";
    case Task::corner_cue: return "corner_cue";
  }
  return "?";
}

inline std::string to_string(TransformerKind t) {
  switch (t) {
    case TransformerKind::squeeze_expand: return "squeeze_expand";
    case TransformerKind::mha: return "mha";
    case TransformerKind::expand_only: return "expand_only";
    case TransformerKind::squeeze_single: return "squeeze_single";
  }
  return "?";
}

inline std::string to_string(PeKind p) {
  switch (p) {
    case PeKind::none: return "none";
    case PeKind::fixed: return "fixed";
    case PeKind::discrete: return "discrete";
    case PeKind::learnable: return "learnable";
  }
  return "?";
}

inline std::string to_string(Precision p) { return p == Precision::single ? "single" : "double"; }

inline Task parse_task(std::string_view s) {
  if (s == "rings") return Task::rings;
  if (s == "blobs") return Task::blobs;
  if (s == "corner_cue") return Task::corner_cue;
  throw ConfigError("unknown task '" + std::string(s) + "' (rings|blobs|corner_cue)");
}

inline TransformerKind parse_transformer(std::string_view s) {
  if (s == "squeeze_expand") return TransformerKind::squeeze_expand;
  if (s == "mha") return TransformerKind::mha;
  if (s == "expand_only") return TransformerKind::expand_only;
  if (s == "squeeze_single") return TransformerKind::squeeze_single;
  throw ConfigError("unknown transformer '" + std::string(s) +
                    "' (squeeze_expand|mha|expand_only|squeeze_single)");
}

inline PeKind parse_pe(std::string_view s) {
  if (s == "none") return PeKind::none;
  if (s == "fixed") return PeKind::fixed;
  if (s == "discrete") return PeKind::discrete;
  if (s == "learnable") return PeKind::learnable;
  throw ConfigError("unknown pe '" + std::string(s) + "' (none|fixed|discrete|learnable)");
}

inline Precision parse_precision(std::string_view s) {
  if (s == "single") return Precision::single;
  if (s == "double") return Precision::double_precision;
  throw ConfigError("unknown precision '" + std::string(s) + "' (single|double)");
}

// ---------------------------------------------------------------- key = value

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "' expects a non-negative integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

inline double parse_real(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const std::string s(v);
    const double out = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + std::string(key) + "' expects a boolean, got '" + std::string(v) + "'");
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline void set_config_value(SegtranConfig& c, std::string_view key, std::string_view raw) {
  using namespace detail;
  const std::string_view v = trim(raw);
  if (key == "task") c.task = parse_task(v);
  else if (key == "image_size" || key == "size") c.image_size = parse_uint(key, v);
  else if (key == "classes") c.classes = parse_uint(key, v);
  else if (key == "in_channels") c.in_channels = parse_uint(key, v);
  else if (key == "channels") {
    std::array<std::size_t, 4> ch{};
    std::size_t n = 0;
    std::string_view rest = v;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const auto item = trim(rest.substr(0, comma));
      if (n == 4) throw ConfigError("config key 'channels' expects four comma-separated widths");
      ch[n++] = parse_uint(key, item);
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    if (n != 4) throw ConfigError("config key 'channels' expects four comma-separated widths");
    c.channels = ch;
  }
  else if (key == "transformer") c.transformer = parse_transformer(v);
  else if (key == "layers") c.layers = parse_uint(key, v);
  else if (key == "modes") c.modes = parse_uint(key, v);
  else if (key == "codebook") c.codebook = parse_uint(key, v);
  else if (key == "heads") c.heads = parse_uint(key, v);
  else if (key == "pe") c.pe = parse_pe(v);
  else if (key == "cnn_only") c.cnn_only = parse_bool(key, v);
  else if (key == "layernorm") c.layer_norm = parse_bool(key, v);
  else if (key == "lr") c.lr = parse_real(key, v);
  else if (key == "beta1") c.beta1 = parse_real(key, v);
  else if (key == "beta2") c.beta2 = parse_real(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
  else if (key == "adam_eps") c.adam_eps = parse_real(key, v);
  else if (key == "batch") c.batch = parse_uint(key, v);
  else if (key == "iters") c.iters = parse_uint(key, v);
  else if (key == "eval_every") c.eval_every = parse_uint(key, v);
  else if (key == "holdout") c.holdout = parse_uint(key, v);
  else if (key == "seed") c.seed = parse_uint(key, v);
  else if (key == "precision") c.precision = parse_precision(v);
  else if (key == "threads") c.threads = parse_uint(key, v);
  else if (key == "timing") c.timing = parse_bool(key, v);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

/// Applies UTF-8 `key = value` lines on top of base. '#' starts a comment.
inline SegtranConfig parse_config(std::string_view text, SegtranConfig base = {}) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    set_config_value(base, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

inline std::string format_config(const SegtranConfig& c) {
  using detail::format_real;
  std::ostringstream os;
  os << "task = " << to_string(c.task) << "\n"
     << "image_size = " << c.image_size << "\n"
     << "classes = " << resolved_classes(c) << "\n"
     << "in_channels = " << c.in_channels << "\n"
     << "channels = " << c.channels[0] << "," << c.channels[1] << "," << c.channels[2] << ","
     << c.channels[3] << "\n"
     << "transformer = " << to_string(c.transformer) << "\n"
     << "layers = " << c.layers << "\n"
     << "modes = " << c.modes << "\n"
     << "codebook = " << c.codebook << "\n"
     << "heads = " << c.heads << "\n"
     << "pe = " << to_string(c.pe) << "\n"
     << "cnn_only = " << (c.cnn_only ? "true" : "false") << "\n"
     << "layernorm = " << (c.layer_norm ? "true" : "false") << "\n"
     << "lr = " << format_real(c.lr) << "\n"
     << "beta1 = " << format_real(c.beta1) << "\n"
     << "beta2 = " << format_real(c.beta2) << "\n"
     << "weight_decay = " << format_real(c.weight_decay) << "\n"
     << "adam_eps = " << format_real(c.adam_eps) << "\n"
     << "batch = " << c.batch << "\n"
     << "iters = " << c.iters << "\n"
     << "eval_every = " << c.eval_every << "\n"
     << "holdout = " << c.holdout << "\n"
     << "seed = " << c.seed << "\n"
     << "precision = " << to_string(c.precision) << "\n"
     << "threads = " << c.threads << "\n"
     << "timing = " << (c.timing ? "true" : "false") << "\n";
  return os.str();
}

inline void validate(const SegtranConfig& c) {
  if (c.image_size == 0 || c.image_size % 16 != 0) {
    throw ConfigError("image_size " + std::to_string(c.image_size) + " is not divisible by 16");
  }
  if (c.in_channels != 1 && c.in_channels != 3) {
    throw ConfigError("in_channels must be 1 or 3, got " + std::to_string(c.in_channels));
  }
  const std::size_t k = resolved_classes(c);
  if (k < 2) throw ConfigError("classes must be at least 2");
  if (k != task_classes(c.task)) {
    throw ConfigError("task " + to_string(c.task) + " has " + std::to_string(task_classes(c.task)) +
                      " classes, config asks for " + std::to_string(k));
  }
  for (std::size_t ch : c.channels) {
    if (ch == 0) throw ConfigError("channel widths must be positive");
  }
  if (!c.cnn_only) {
    if (c.layers < 1 || c.layers > 4) {
      throw ConfigError("layers must be in 1..4, got " + std::to_string(c.layers));
    }
    if (c.modes < 1) throw ConfigError("modes must be at least 1");
    if (c.codebook < 1) throw ConfigError("codebook must be at least 1");
    if (c.transformer == TransformerKind::mha && (c.heads == 0 || c.width() % c.heads != 0)) {
      throw ConfigError("transformer width " + std::to_string(c.width()) +
                        " is not divisible by heads " + std::to_string(c.heads));
    }
    if (c.pe == PeKind::learnable && c.width() % 2 != 0) {
      throw ConfigError("learnable positional encoding needs an even transformer width");
    }
    if (c.pe == PeKind::fixed && c.width() % 4 != 0) {
      throw ConfigError("fixed positional encoding needs a transformer width divisible by 4");
    }
  }
  if (c.batch == 0) throw ConfigError("batch must be at least 1");
  if (c.eval_every == 0) throw ConfigError("eval_every must be at least 1");
  if (c.holdout == 0) throw ConfigError("holdout must be at least 1");
  if (!(c.lr > 0)) throw ConfigError("lr must be positive");
}

}  // namespace segtran
