#pragma once

// Binary parameter file:
//   "SGTR" | u32 version | u32 count |
//   count × { u32 name_len | name | u8 dtype | u8 rank | rank × u64 extent | values }
// All integers and values little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "segtran/param_store.hpp"

namespace segtran {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <Real T>
std::string save_checkpoint(const ParamStore<T>& params) {
  std::string out = "SGTR";
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (ParamId i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor<T>& v = params.value(i);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(v.rank()));
    for (std::size_t d : v.shape()) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(v.data().data()), v.size() * sizeof(T));
  }
  return out;
}

template <Real T>
ParamStore<T> load_checkpoint(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(4, "magic") != "SGTR") throw FormatError("not a checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("tensor count");
  ParamStore<T> params;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = in.get<std::uint32_t>("name length");
    std::string name(in.take(len, "name"));
    const auto tag = in.get<std::uint8_t>("dtype");
    if (tag != static_cast<std::uint8_t>(dtype_of<T>())) {
      throw FormatError("tensor " + name + " has dtype tag " + std::to_string(tag) + ", expected " +
                        std::to_string(static_cast<int>(dtype_of<T>())));
    }
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint64_t>("extent");
    const std::size_t n = num_elements(shape);
    if (n == 0) throw FormatError("tensor " + name + " has an empty extent");
    const auto raw = in.take(n * sizeof(T), "values");
    std::vector<T> values(n);
    std::memcpy(values.data(), raw.data(), raw.size());
    try {
      params.add(std::move(name), Tensor<T>(std::move(shape), std::move(values)));
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after the last tensor");
  return params;
}

/// Copies values from `source` into `target` by name. Every parameter of the
/// target must be present with the same shape; all mismatches are reported at once.
template <Real T>
void assign_params(ParamStore<T>& target, const ParamStore<T>& source) {
  std::string missing, mismatched;
  for (ParamId i = 0; i < target.size(); ++i) {
    auto j = source.find(target.name(i));
    if (!j) {
      missing += " " + target.name(i);
    } else if (source.value(*j).shape() != target.value(i).shape()) {
      mismatched += " " + target.name(i) + " " + to_string(source.value(*j).shape()) + "->" +
                    to_string(target.value(i).shape());
    }
  }
  if (source.size() != target.size() || !missing.empty() || !mismatched.empty()) {
    std::string msg = "checkpoint does not fit the model;";
    if (!mismatched.empty()) msg += " shape mismatch:" + mismatched + ";";
    if (!missing.empty()) msg += " missing:" + missing + ";";
    if (source.size() != target.size()) {
      msg += " checkpoint has " + std::to_string(source.size()) + " tensors, model has " +
             std::to_string(target.size());
    }
    throw DimensionError(msg);
  }
  for (ParamId i = 0; i < target.size(); ++i) target.value(i) = source.value(*source.find(target.name(i)));
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace segtran
