#pragma once

// Full pipeline: conv backbone (scales 1/2..1/16) → input FPN (1/8) →
// positional encoding + flatten → transformer stack → output FPN (1/2) →
// 1×1 segmentation head → ×2 bilinear to input resolution.

#include <array>
#include <iostream>
#include <string>
#include <vector>

#include "segtran/attention.hpp"
#include "segtran/config.hpp"
#include "segtran/positional_encoding.hpp"

namespace segtran {

struct ConvParams {
  ParamId kernel = 0;  // [C_out × C_in × k × k]
  ParamId bias = 0;    // [C_out]
  std::size_t stride = 1, pad = 0;
};

struct BackboneStage {
  ConvParams down;    // 3×3, stride 2
  ConvParams refine;  // 3×3, stride 1
};

struct BackboneParams {
  std::array<BackboneStage, 4> stages;
};

template <Real T>
struct SegtranModel {
  SegtranConfig config;
  ParamStore<T> params;
  BackboneParams backbone;
  ConvParams conv34, conv12, conv24, head;
  PeParams pe;
  std::vector<TransformerLayer> transformer;  // empty for cnn_only

  std::size_t classes() const { return resolved_classes(config); }
};

template <Real T>
ConvParams make_conv(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                     std::size_t k, std::size_t stride, Rng& rng) {
  const std::size_t fan_in = in * k * k;
  ConvParams p;
  p.kernel = store.add(name + ".kernel", he_uniform<T>(Shape{out, in, k, k}, fan_in, rng));
  p.bias = store.add(name + ".bias", fan_in_uniform<T>(Shape{out}, fan_in, rng));
  p.stride = stride;
  p.pad = k / 2;
  return p;
}

/// Builds and initializes every parameter from config.seed.
template <Real T>
SegtranModel<T> build_model(const SegtranConfig& config) {
  validate(config);
  SegtranModel<T> m;
  m.config = config;
  Rng rng(config.seed);
  const auto& ch = config.channels;
  std::size_t in = config.in_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string name = "backbone.s" + std::to_string(s + 1);
    m.backbone.stages[s].down = make_conv(m.params, name + ".down", in, ch[s], 3, 2, rng);
    m.backbone.stages[s].refine = make_conv(m.params, name + ".refine", ch[s], ch[s], 3, 1, rng);
    in = ch[s];
  }
  const std::size_t width = config.width();
  m.conv34 = make_conv(m.params, "fpn.conv34", ch[2], ch[3], 1, 1, rng);
  m.conv12 = make_conv(m.params, "fpn.conv12", ch[0], ch[1], 1, 1, rng);
  m.conv24 = make_conv(m.params, "fpn.conv24", ch[1], width, 1, 1, rng);

  const std::size_t grid = config.image_size / 8;
  if (!config.cnn_only) {
    m.pe = make_pe(m.params, config.pe, grid, grid, width, rng);
    if (config.codebook >= grid * grid && config.transformer != TransformerKind::mha &&
        config.transformer != TransformerKind::expand_only) {
      std::clog << "warning: codebook size " << config.codebook << " is not smaller than the "
                << grid * grid << " transformer units\n";
    }
    for (std::size_t l = 0; l < config.layers; ++l) {
      const std::string name = "transformer." + std::to_string(l);
      switch (config.transformer) {
        case TransformerKind::squeeze_expand:
        case TransformerKind::squeeze_single:
          m.transformer.emplace_back(make_sab(m.params, name, width, config.codebook,
                                              effective_modes(config), config.layer_norm, rng));
          break;
        case TransformerKind::expand_only:
          m.transformer.emplace_back(make_eab(m.params, name, width, config.modes, config.layer_norm, rng));
          break;
        case TransformerKind::mha:
          m.transformer.emplace_back(make_mha(m.params, name, width, config.heads, config.layer_norm, rng));
          break;
      }
    }
  } else {
    m.pe = PeParams{PeKind::none, grid, grid, width, {}, 0};
  }
  m.head = make_conv(m.params, "head", width, resolved_classes(config), 1, 1, rng);
  return m;
}

// ---------------------------------------------------------------- stages

template <Real T>
Var<T> conv_layer(Graph<T>& g, const Var<T>& x, const ConvParams& p) {
  return add_channel_bias(conv2d(x, g.param(p.kernel), p.stride, p.pad), g.param(p.bias));
}

template <Real T>
struct BackboneFeatures {
  Var<T> f1, f2, f3, f4;
};

template <Real T>
BackboneFeatures<T> backbone_forward(Graph<T>& g, const Var<T>& image, const BackboneParams& p) {
  const Shape& s = image.shape();
  if (s.size() != 3) throw DimensionError("backbone expects a [D×H×W] image, got " + to_string(s));
  if (s[0] != 1 && s[0] != 3) {
    throw ConfigError("image must have 1 or 3 channels, got " + std::to_string(s[0]));
  }
  if (s[1] % 16 != 0) throw ConfigError("image height " + std::to_string(s[1]) + " is not divisible by 16");
  if (s[2] % 16 != 0) throw ConfigError("image width " + std::to_string(s[2]) + " is not divisible by 16");
  std::array<Var<T>, 4> f;
  Var<T> x = image;
  for (std::size_t i = 0; i < 4; ++i) {
    x = silu(conv_layer(g, x, p.stages[i].down));
    x = silu(conv_layer(g, x, p.stages[i].refine));
    f[i] = x;
  }
  return {f[0], f[1], f[2], f[3]};
}

/// f₃₄ = upsample×2(f₄) + conv34(f₃)
template <Real T>
Var<T> input_fpn(Graph<T>& g, const Var<T>& f3, const Var<T>& f4, const ConvParams& conv34) {
  return add(upsample_bilinear(f4, 2), conv_layer(g, f3, conv34));
}

/// [C×h×w] → [h·w × C] in row-major unit order, plus the positional encoding.
template <Real T>
Var<T> flatten_with_pe(Graph<T>& g, const Var<T>& f34, const PeParams& pe) {
  const std::size_t c = f34.dim(0), h = f34.dim(1), w = f34.dim(2);
  if (pe.channels != c || pe.grid_h != h || pe.grid_w != w) {
    throw ConfigError("positional encoding for a " + std::to_string(pe.grid_h) + "x" +
                      std::to_string(pe.grid_w) + "x" + std::to_string(pe.channels) +
                      " grid does not match features " + to_string(f34.shape()));
  }
  Var<T> units = transpose(reshape(f34, Shape{c, h * w}));
  if (pe.kind == PeKind::none) return units;
  return add(units, positional_encoding(g, pe));
}

template <Real T>
Var<T> unflatten(const Var<T>& units, std::size_t h, std::size_t w) {
  const std::size_t c = units.dim(1);
  return reshape(transpose(units), Shape{c, h, w});
}

/// f₁₂ = upsample×2(f₂) + conv12(f₁); g₁₂₃₄ = upsample×4(g₃₄) + conv24(f₁₂)
template <Real T>
Var<T> output_fpn(Graph<T>& g, const Var<T>& f1, const Var<T>& f2, const Var<T>& g34,
                  const ConvParams& conv12, const ConvParams& conv24) {
  Var<T> f12 = add(upsample_bilinear(f2, 2), conv_layer(g, f1, conv12));
  return add(upsample_bilinear(g34, 4), conv_layer(g, f12, conv24));
}

/// 1×1 conv to K class scores at 1/2 scale, then ×2 to input resolution.
template <Real T>
Var<T> seg_head(Graph<T>& g, const Var<T>& g1234, const ConvParams& head) {
  return upsample_bilinear(conv_layer(g, g1234, head), 2);
}

namespace detail {

inline void require_scale(const Shape& s, std::size_t h0, std::size_t w0, std::size_t divisor,
                          const char* what) {
  if (s.size() != 3 || s[1] * divisor != h0 || s[2] * divisor != w0) {
    throw DimensionError(std::string(what) + " has shape " + to_string(s) + ", expected 1/" +
                         std::to_string(divisor) + " of " + std::to_string(h0) + "x" + std::to_string(w0));
  }
}

}  // namespace detail

/// Logits [K×H₀×W₀]. Every intermediate map is checked against its scale.
template <Real T>
Var<T> segtran_forward(Graph<T>& g, const Var<T>& image, const SegtranModel<T>& model) {
  const std::size_t h0 = image.dim(1), w0 = image.dim(2);
  auto f = backbone_forward(g, image, model.backbone);
  detail::require_scale(f.f1.shape(), h0, w0, 2, "f1");
  detail::require_scale(f.f2.shape(), h0, w0, 4, "f2");
  detail::require_scale(f.f3.shape(), h0, w0, 8, "f3");
  detail::require_scale(f.f4.shape(), h0, w0, 16, "f4");
  Var<T> f34 = input_fpn(g, f.f3, f.f4, model.conv34);
  detail::require_scale(f34.shape(), h0, w0, 8, "f34");
  Var<T> g34 = f34;
  if (!model.transformer.empty()) {
    const std::size_t h = f34.dim(1), w = f34.dim(2);
    Var<T> units = flatten_with_pe(g, f34, model.pe);
    units = stack_layers<T>(g, units, model.transformer);
    g34 = unflatten(units, h, w);
  }
  detail::require_scale(g34.shape(), h0, w0, 8, "g34");
  Var<T> g1234 = output_fpn(g, f.f1, f.f2, g34, model.conv12, model.conv24);
  detail::require_scale(g1234.shape(), h0, w0, 2, "g1234");
  Var<T> logits = seg_head(g, g1234, model.head);
  detail::require_scale(logits.shape(), h0, w0, 1, "logits");
  if (logits.dim(0) != model.classes()) {
    throw DimensionError("head produced " + std::to_string(logits.dim(0)) + " classes, expected " +
                         std::to_string(model.classes()));
  }
  return logits;
}

}  // namespace segtran
