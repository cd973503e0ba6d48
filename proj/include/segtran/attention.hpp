#pragma once

// Transformer layer family: tied-projection single-head attention, the
// Expanded Attention Block (mixture of single-head modes fused by a per-unit
// softmax gate), the Squeezed Attention Block (attention routed through a
// learned codebook of M inducing points), and an untied multi-head baseline.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "segtran/init.hpp"
#include "segtran/ops.hpp"
#include "segtran/param_store.hpp"

namespace segtran {

struct LinearParams {
  ParamId weight = 0;  // [in × out]
  ParamId bias = 0;    // [out]
};

struct LayerNormParams {
  ParamId gamma = 0, beta = 0;
};

struct FfnParams {
  LinearParams hidden, out;
};

/// One single-head transformer. The same W_kq projects both the query side
/// and the key side, so self-attention logits are symmetric.
struct SingleHeadParams {
  std::size_t width = 0;
  ParamId w_kq = 0;
  ParamId w_v = 0;
  FfnParams ffn;
  std::optional<LayerNormParams> norm1, norm2;
};

struct EabParams {
  std::vector<SingleHeadParams> modes;
  std::vector<LinearParams> gates;  // C → 1 per mode
};

struct SabParams {
  ParamId codebook = 0;  // [M × C]
  SingleHeadParams squeeze;
  EabParams expand;
};

struct MhaParams {
  std::size_t width = 0, heads = 0;
  std::vector<ParamId> w_q, w_k, w_v;  // [C × C/heads] each
  LinearParams out;
  FfnParams ffn;
  std::optional<LayerNormParams> norm1, norm2;
};

// A standalone EabParams layer is the no-squeeze variant (self-attention modes).
using TransformerLayer = std::variant<SabParams, EabParams, MhaParams>;

// ---------------------------------------------------------------- builders

template <Real T>
LinearParams make_linear(ParamStore<T>& store, const std::string& name, std::size_t in,
                         std::size_t out, Rng& rng) {
  LinearParams p;
  p.weight = store.add(name + ".weight", fan_in_uniform<T>(Shape{in, out}, in, rng));
  p.bias = store.add(name + ".bias", fan_in_uniform<T>(Shape{out}, in, rng));
  return p;
}

template <Real T>
LayerNormParams make_layer_norm(ParamStore<T>& store, const std::string& name, std::size_t width) {
  return {store.add(name + ".gamma", Tensor<T>(Shape{width}, T(1))),
          store.add(name + ".beta", Tensor<T>(Shape{width}, T(0)))};
}

template <Real T>
FfnParams make_ffn(ParamStore<T>& store, const std::string& name, std::size_t width, Rng& rng) {
  const std::size_t hidden = 2 * width;
  FfnParams p;
  p.hidden = make_linear(store, name + ".hidden", width, hidden, rng);
  p.out = make_linear(store, name + ".out", hidden, width, rng);
  return p;
}

template <Real T>
SingleHeadParams make_single_head(ParamStore<T>& store, const std::string& prefix, std::size_t width,
                                  bool layer_norm, Rng& rng) {
  SingleHeadParams p;
  p.width = width;
  p.w_kq = store.add(prefix + ".w_kq", fan_in_uniform<T>(Shape{width, width}, width, rng));
  p.w_v = store.add(prefix + ".w_v", fan_in_uniform<T>(Shape{width, width}, width, rng));
  p.ffn = make_ffn(store, prefix + ".ffn", width, rng);
  if (layer_norm) {
    p.norm1 = make_layer_norm(store, prefix + ".norm1", width);
    p.norm2 = make_layer_norm(store, prefix + ".norm2", width);
  }
  return p;
}

template <Real T>
EabParams make_eab(ParamStore<T>& store, const std::string& prefix, std::size_t width,
                   std::size_t modes, bool layer_norm, Rng& rng) {
  if (modes == 0) throw ConfigError("expanded attention block needs at least one mode");
  EabParams p;
  for (std::size_t k = 0; k < modes; ++k) {
    p.modes.push_back(make_single_head(store, prefix + ".mode" + std::to_string(k), width, layer_norm, rng));
    p.gates.push_back(make_linear(store, prefix + ".gate" + std::to_string(k), width, 1, rng));
  }
  return p;
}

template <Real T>
SabParams make_sab(ParamStore<T>& store, const std::string& prefix, std::size_t width,
                   std::size_t codebook_size, std::size_t modes, bool layer_norm, Rng& rng) {
  if (codebook_size == 0) throw ConfigError("codebook size must be at least 1");
  SabParams p;
  p.codebook = store.add(prefix + ".codebook",
                         normal_tensor<T>(Shape{codebook_size, width}, 0.0,
                                          1.0 / std::sqrt(static_cast<double>(width)), rng));
  p.squeeze = make_single_head(store, prefix + ".squeeze", width, layer_norm, rng);
  p.expand = make_eab(store, prefix + ".expand", width, modes, layer_norm, rng);
  return p;
}

template <Real T>
MhaParams make_mha(ParamStore<T>& store, const std::string& prefix, std::size_t width,
                   std::size_t heads, bool layer_norm, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("multi-head attention needs the width " + std::to_string(width) +
                      " divisible by the head count " + std::to_string(heads));
  }
  MhaParams p;
  p.width = width;
  p.heads = heads;
  const std::size_t head_dim = width / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    p.w_q.push_back(store.add(hp + ".w_q", fan_in_uniform<T>(Shape{width, head_dim}, width, rng)));
    p.w_k.push_back(store.add(hp + ".w_k", fan_in_uniform<T>(Shape{width, head_dim}, width, rng)));
    p.w_v.push_back(store.add(hp + ".w_v", fan_in_uniform<T>(Shape{width, head_dim}, width, rng)));
  }
  p.out = make_linear(store, prefix + ".out", width, width, rng);
  p.ffn = make_ffn(store, prefix + ".ffn", width, rng);
  if (layer_norm) {
    p.norm1 = make_layer_norm(store, prefix + ".norm1", width);
    p.norm2 = make_layer_norm(store, prefix + ".norm2", width);
  }
  return p;
}

// ---------------------------------------------------------------- forward

template <Real T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const LinearParams& p) {
  return add_row_bias(matmul(x, g.param(p.weight)), g.param(p.bias));
}

template <Real T>
Var<T> layer_norm(Graph<T>& g, const Var<T>& x, const LayerNormParams& p) {
  return add_row_bias(mul_row(standardize_rows(x), g.param(p.gamma)), g.param(p.beta));
}

template <Real T>
Var<T> ffn(Graph<T>& g, const Var<T>& x, const FfnParams& p) {
  return linear(g, silu(linear(g, x, p.hidden)), p.out);
}

namespace detail {

template <Real T>
void require_width(const Var<T>& x, std::size_t width, const char* what) {
  if (x.value().rank() != 2 || x.dim(1) != width) {
    throw DimensionError(std::string(what) + ": expected [N×" + std::to_string(width) + "], got " +
                         to_string(x.shape()));
  }
}

}  // namespace detail

/// Pre-softmax scores S = (X_q·W_kq)(X_kv·W_kq)ᵀ / √C, shape [N_q × N_k].
template <Real T>
Var<T> attention_logits(Graph<T>& g, const Var<T>& xq, const Var<T>& xkv, const SingleHeadParams& p) {
  detail::require_width(xq, p.width, "attention query");
  detail::require_width(xkv, p.width, "attention key/value");
  Var<T> w = g.param(p.w_kq);
  Var<T> q = matmul(xq, w);
  Var<T> k = (xq.id() == xkv.id() && xq.tape_ptr() == xkv.tape_ptr()) ? q : matmul(xkv, w);
  return scale(matmul_nt(q, k), T(1) / std::sqrt(static_cast<T>(p.width)));
}

template <Real T>
Var<T> tied_attention(Graph<T>& g, const Var<T>& xq, const Var<T>& xkv, const SingleHeadParams& p) {
  Var<T> weights = softmax(attention_logits(g, xq, xkv, p), 1);
  g.hooks().note_attention(weights.value());
  return matmul(weights, matmul(xkv, g.param(p.w_v)));
}

/// h = LN₁(X_q + attention), y = LN₂(h + FFN(h)). Without layer norm the
/// block is the bare FFN(attention).
template <Real T>
Var<T> single_head_layer(Graph<T>& g, const Var<T>& xq, const Var<T>& xkv, const SingleHeadParams& p) {
  Var<T> att = tied_attention(g, xq, xkv, p);
  if (!p.norm1) return ffn(g, att, p.ffn);
  Var<T> h = layer_norm(g, add(xq, att), *p.norm1);
  return layer_norm(g, add(h, ffn(g, h, p.ffn)), *p.norm2);
}

/// Mixture of single-head modes. Each mode's output passes through its own
/// C→1 gate; a softmax over modes gives G [N_q × N_m], and output row u is
/// Σ_k G[u,k]·X⁽ᵏ⁾[u].
template <Real T>
Var<T> eab(Graph<T>& g, const Var<T>& xq, const Var<T>& xkv, const EabParams& p) {
  if (p.modes.empty()) throw ConfigError("expanded attention block has no modes");
  const auto knockout = g.hooks().knockout_mode;
  std::vector<Var<T>> outputs, logits;
  for (std::size_t k = 0; k < p.modes.size(); ++k) {
    if (knockout && *knockout == k && p.modes.size() > 1) continue;
    outputs.push_back(single_head_layer(g, xq, xkv, p.modes[k]));
    logits.push_back(linear(g, outputs.back(), p.gates[k]));
  }
  Var<T> gate = softmax(concat_cols(logits), 1);
  g.hooks().note_gate(gate.value());
  Var<T> out = scale_rows(outputs[0], slice_cols(gate, 0, 1));
  for (std::size_t k = 1; k < outputs.size(); ++k) {
    out = add(out, scale_rows(outputs[k], slice_cols(gate, k, 1)));
  }
  return out;
}

/// Codebook attends to the input (attention M×N), then the input attends to
/// the transformed codebook through an expanded block (attention N×M).
template <Real T>
Var<T> sab(Graph<T>& g, const Var<T>& x, const SabParams& p) {
  Var<T> codebook = g.param(p.codebook);
  Var<T> squeezed = single_head_layer(g, codebook, x, p.squeeze);
  return eab(g, x, squeezed, p.expand);
}

/// Untied multi-head self-attention with per-head width C/heads, concatenated
/// and mixed by an output affine map, followed by the same residual/FFN
/// structure as single_head_layer.
template <Real T>
Var<T> mha_layer(Graph<T>& g, const Var<T>& x, const MhaParams& p) {
  detail::require_width(x, p.width, "multi-head attention");
  const std::size_t head_dim = p.width / p.heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    Var<T> q = matmul(x, g.param(p.w_q[h]));
    Var<T> k = matmul(x, g.param(p.w_k[h]));
    Var<T> v = matmul(x, g.param(p.w_v[h]));
    Var<T> weights = softmax(scale(matmul_nt(q, k), inv_scale), 1);
    g.hooks().note_attention(weights.value());
    heads.push_back(matmul(weights, v));
  }
  Var<T> att = linear(g, heads.size() == 1 ? heads[0] : concat_cols(heads), p.out);
  if (!p.norm1) return ffn(g, att, p.ffn);
  Var<T> h = layer_norm(g, add(x, att), *p.norm1);
  return layer_norm(g, add(h, ffn(g, h, p.ffn)), *p.norm2);
}

template <Real T>
Var<T> apply_layer(Graph<T>& g, const Var<T>& x, const TransformerLayer& layer) {
  return std::visit(
      [&](const auto& p) -> Var<T> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, SabParams>) {
          return sab(g, x, p);
        } else if constexpr (std::is_same_v<P, EabParams>) {
          return eab(g, x, x, p);
        } else {
          return mha_layer(g, x, p);
        }
      },
      layer);
}

template <Real T>
Var<T> stack_layers(Graph<T>& g, const Var<T>& x, std::span<const TransformerLayer> layers) {
  if (layers.empty()) throw ConfigError("transformer stack is empty");
  if (layers.size() > 4) throw ConfigError("transformer stack supports 1 to 4 layers, got " + std::to_string(layers.size()));
  Var<T> h = x;
  for (const TransformerLayer& layer : layers) {
    h = apply_layer(g, h, layer);
    if (h.shape() != x.shape()) {
      throw DimensionError("transformer layer changed the unit layout from " + to_string(x.shape()) +
                           " to " + to_string(h.shape()));
    }
  }
  return h;
}

}  // namespace segtran
