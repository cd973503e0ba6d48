#pragma once

// Finite-difference checks for every differentiable operation, block and
// loss, plus a tiny end-to-end model. Each case contracts the op output with
// a fixed random tensor so that no gradient is trivially zero.

#include <functional>
#include <string>
#include <vector>

#include "segtran/grad_check.hpp"
#include "segtran/losses.hpp"
#include "segtran/segnet.hpp"

namespace segtran {

struct GradCase {
  std::string name;
  std::function<GradCheckReport()> run;
};

namespace detail {

using D = double;

inline Var<D> contract(Graph<D>& g, const Var<D>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, g.constant(uniform_tensor<D>(y.shape(), -1.0, 1.0, rng))));
}

inline Tensor<D> rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor<D>(std::move(s), lo, hi, rng);
}

// Case over parameters built by `setup`, evaluated by `body`.
template <class Setup, class Body>
GradCase make_case(std::string name, Setup setup, Body body) {
  return {name, [setup, body]() {
            ParamStore<D> store;
            Rng rng(7);
            auto ctx = setup(store, rng);
            return grad_check([&](Graph<D>& g) { return body(g, ctx); }, store);
          }};
}

// Case for an op of one or two plain tensor arguments.
inline GradCase unary_case(std::string name, Shape shape, std::function<Var<D>(const Var<D>&)> op,
                           double lo = -1.0, double hi = 1.0) {
  return make_case(
      name, [=](ParamStore<D>& s, Rng& rng) { return s.add("x", rand_tensor(shape, rng, lo, hi)); },
      [op](Graph<D>& g, ParamId x) { return contract(g, op(g.param(x))); });
}

inline GradCase binary_case(std::string name, Shape sa, Shape sb,
                            std::function<Var<D>(const Var<D>&, const Var<D>&)> op, double blo = -1.0,
                            double bhi = 1.0) {
  return make_case(
      name,
      [=](ParamStore<D>& s, Rng& rng) {
        ParamId a = s.add("a", rand_tensor(sa, rng));
        ParamId b = s.add("b", rand_tensor(sb, rng, blo, bhi));
        return std::pair(a, b);
      },
      [op](Graph<D>& g, std::pair<ParamId, ParamId> ids) {
        return contract(g, op(g.param(ids.first), g.param(ids.second)));
      });
}

inline LabelMask probe_mask(std::size_t h, std::size_t w, std::size_t classes) {
  LabelMask m(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) m.labels[i] = static_cast<std::uint8_t>((i * 7 + i / w) % classes);
  return m;
}

}  // namespace detail

/// Small end-to-end configuration used by the full-model check.
inline SegtranConfig tiny_model_config() {
  SegtranConfig c;
  c.image_size = 32;
  c.channels = {4, 8, 8, 8};
  c.layers = 2;
  c.modes = 2;
  c.codebook = 4;
  c.seed = 10;
  return c;
}

inline std::vector<GradCase> gradient_cases() {
  using namespace detail;
  using V = Var<D>;
  std::vector<GradCase> cases;

  cases.push_back(binary_case("matmul", {3, 4}, {4, 5}, [](const V& a, const V& b) { return matmul(a, b); }));
  cases.push_back(binary_case("matmul_nt", {3, 4}, {5, 4}, [](const V& a, const V& b) { return matmul_nt(a, b); }));
  cases.push_back(unary_case("transpose", {3, 4}, [](const V& a) { return transpose(a); }));
  cases.push_back(binary_case("add", {2, 3, 4}, {2, 3, 4}, [](const V& a, const V& b) { return add(a, b); }));
  cases.push_back(binary_case("sub", {3, 4}, {3, 4}, [](const V& a, const V& b) { return sub(a, b); }));
  cases.push_back(binary_case("mul", {3, 4}, {3, 4}, [](const V& a, const V& b) { return mul(a, b); }));
  cases.push_back(binary_case("div", {3, 4}, {3, 4}, [](const V& a, const V& b) { return div(a, b); }, 0.5, 1.5));
  cases.push_back(unary_case("scale", {3, 4}, [](const V& a) { return scale(a, 1.7); }));
  cases.push_back(unary_case("add_scalar", {3, 4}, [](const V& a) { return mul(add_scalar(a, 0.3), a); }));
  cases.push_back(unary_case("silu", {3, 4}, [](const V& a) { return silu(a); }, -3.0, 3.0));
  cases.push_back(unary_case("sin", {3, 4}, [](const V& a) { return sin(a); }, -3.0, 3.0));
  cases.push_back(unary_case("cos", {3, 4}, [](const V& a) { return cos(a); }, -3.0, 3.0));
  cases.push_back(binary_case("add_row_bias", {3, 4}, {4}, [](const V& a, const V& b) { return add_row_bias(a, b); }));
  cases.push_back(binary_case("mul_row", {3, 4}, {4}, [](const V& a, const V& b) { return mul_row(a, b); }));
  cases.push_back(binary_case("scale_rows", {3, 4}, {3}, [](const V& a, const V& b) { return scale_rows(a, b); }));
  cases.push_back(binary_case("add_channel_bias", {2, 3, 4}, {2},
                              [](const V& a, const V& b) { return add_channel_bias(a, b); }));
  cases.push_back(unary_case("sum", {3, 4}, [](const V& a) { return mul(sum(a), sum(a)); }));
  cases.push_back(unary_case("mean", {3, 4}, [](const V& a) { return mul(mean(a), mean(a)); }));
  cases.push_back(unary_case("row_sum", {3, 4, 2}, [](const V& a) { return row_sum(a); }));
  for (std::size_t axis = 0; axis < 3; ++axis) {
    cases.push_back(unary_case("softmax_axis" + std::to_string(axis), {3, 4, 5},
                               [axis](const V& a) { return softmax(a, axis); }, -2.0, 2.0));
  }
  for (std::size_t axis = 0; axis < 2; ++axis) {
    cases.push_back(unary_case("log_softmax_axis" + std::to_string(axis), {3, 4, 2},
                               [axis](const V& a) { return log_softmax(a, axis); }, -2.0, 2.0));
  }
  cases.push_back(unary_case("standardize_rows", {4, 6}, [](const V& a) { return standardize_rows(a); }));
  cases.push_back(binary_case("conv2d_3x3_s1", {2, 6, 6}, {3, 2, 3, 3},
                              [](const V& a, const V& b) { return conv2d(a, b, 1, 1); }));
  cases.push_back(binary_case("conv2d_3x3_s2", {2, 7, 6}, {3, 2, 3, 3},
                              [](const V& a, const V& b) { return conv2d(a, b, 2, 1); }));
  cases.push_back(binary_case("conv2d_1x1", {3, 4, 5}, {2, 3, 1, 1},
                              [](const V& a, const V& b) { return conv2d(a, b, 1, 0); }));
  cases.push_back(unary_case("upsample_x2", {2, 3, 4}, [](const V& a) { return upsample_bilinear(a, 2); }));
  cases.push_back(unary_case("upsample_x4", {1, 3, 3}, [](const V& a) { return upsample_bilinear(a, 4); }));
  cases.push_back(unary_case("reshape", {3, 4}, [](const V& a) { return reshape(a, Shape{2, 6}); }));
  cases.push_back(unary_case("slice_cols", {3, 5}, [](const V& a) { return slice_cols(a, 1, 3); }));
  cases.push_back(binary_case("concat_cols", {3, 2}, {3, 3},
                              [](const V& a, const V& b) { return concat_cols<D>({a, b, a}); }));
  cases.push_back(unary_case("gather_rows", {5, 3}, [](const V& a) {
    return gather_rows(a, std::vector<std::size_t>{4, 0, 0, 2});
  }));

  // positional encodings
  cases.push_back(make_case(
      "learnable_pe", [](ParamStore<D>& s, Rng& rng) { return make_pe_weights(s, "pe", 6, rng); },
      [](Graph<D>& g, const PeWeights& w) {
        return contract(g, learnable_sinusoidal_pe(g, g.constant(normalize_coords<D>(3, 4)), w));
      }));
  cases.push_back(make_case(
      "discrete_pe", [](ParamStore<D>& s, Rng& rng) { return make_pe(s, PeKind::discrete, 2, 3, 4, rng); },
      [](Graph<D>& g, const PeParams& p) { return contract(g, positional_encoding(g, p)); }));

  // transformer blocks
  struct Blocks {
    ParamId x, y;
    LinearParams lin;
    LayerNormParams ln;
    FfnParams ffn;
    SingleHeadParams head, bare;
    EabParams eab;
    SabParams sab;
    MhaParams mha;
  };
  auto blocks = [](ParamStore<D>& s, Rng& rng) {
    Blocks b;
    b.x = s.add("x", rand_tensor({6, 4}, rng));
    b.y = s.add("y", rand_tensor({3, 4}, rng));
    b.lin = make_linear(s, "linear", 4, 4, rng);
    b.ln = make_layer_norm(s, "ln", 4);
    s.value(b.ln.gamma) = rand_tensor({4}, rng, 0.5, 1.5);
    s.value(b.ln.beta) = rand_tensor({4}, rng);
    b.ffn = make_ffn(s, "ffn", 4, rng);
    b.head = make_single_head(s, "head", 4, true, rng);
    b.bare = make_single_head(s, "bare", 4, false, rng);
    b.eab = make_eab(s, "eab", 4, 3, true, rng);
    b.sab = make_sab(s, "sab", 4, 3, 2, true, rng);
    b.mha = make_mha(s, "mha", 4, 2, true, rng);
    return b;
  };
  auto block_case = [&](std::string name, std::function<V(Graph<D>&, const Blocks&)> f) {
    cases.push_back(make_case(name, blocks, [f](Graph<D>& g, const Blocks& b) { return contract(g, f(g, b)); }));
  };
  block_case("linear", [](Graph<D>& g, const Blocks& b) { return linear(g, g.param(b.x), b.lin); });
  block_case("layer_norm", [](Graph<D>& g, const Blocks& b) { return layer_norm(g, g.param(b.x), b.ln); });
  block_case("ffn", [](Graph<D>& g, const Blocks& b) { return ffn(g, g.param(b.x), b.ffn); });
  block_case("tied_attention", [](Graph<D>& g, const Blocks& b) {
    return tied_attention(g, g.param(b.x), g.param(b.x), b.head);
  });
  block_case("cross_attention", [](Graph<D>& g, const Blocks& b) {
    return tied_attention(g, g.param(b.y), g.param(b.x), b.head);
  });
  block_case("single_head_layer", [](Graph<D>& g, const Blocks& b) {
    return single_head_layer(g, g.param(b.x), g.param(b.x), b.head);
  });
  block_case("single_head_layer_no_norm", [](Graph<D>& g, const Blocks& b) {
    return single_head_layer(g, g.param(b.x), g.param(b.x), b.bare);
  });
  block_case("expanded_block", [](Graph<D>& g, const Blocks& b) { return eab(g, g.param(b.x), g.param(b.x), b.eab); });
  block_case("squeezed_block", [](Graph<D>& g, const Blocks& b) { return sab(g, g.param(b.x), b.sab); });
  block_case("multi_head_layer", [](Graph<D>& g, const Blocks& b) { return mha_layer(g, g.param(b.x), b.mha); });
  block_case("layer_stack", [](Graph<D>& g, const Blocks& b) {
    std::vector<TransformerLayer> layers{b.sab, b.eab, b.mha};
    return stack_layers<D>(g, g.param(b.x), layers);
  });

  // losses
  auto loss_case = [&](std::string name, std::function<V(const V&, const LabelMask&)> f) {
    cases.push_back(make_case(
        name, [](ParamStore<D>& s, Rng& rng) { return s.add("logits", rand_tensor({3, 4, 4}, rng, -2.0, 2.0)); },
        [f](Graph<D>& g, ParamId x) { return f(g.param(x), probe_mask(4, 4, 3)); }));
  };
  loss_case("ce_loss", [](const V& x, const LabelMask& m) { return ce_loss(x, m); });
  loss_case("dice_loss", [](const V& x, const LabelMask& m) { return dice_loss(x, m); });
  loss_case("combined_loss", [](const V& x, const LabelMask& m) { return combined_loss(x, m); });

  // end to end
  cases.push_back({"segtran_32x32", [] {
                     const SegtranConfig cfg = tiny_model_config();
                     SegtranModel<D> model = build_model<D>(cfg);
                     const SyntheticSample sample = gen_synthetic(11, cfg.task, 32, 32, 3);
                     return grad_check(
                         [&](Graph<D>& g) {
                           return combined_loss(segtran_forward(g, g.input(sample.image), model), sample.mask);
                         },
                         model.params);
                   }});
  return cases;
}

}  // namespace segtran
