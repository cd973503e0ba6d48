#include <gtest/gtest.h>

#include "oracle.hpp"
#include "segtran/segtran.hpp"

using namespace segtran;

namespace {

SegtranConfig small_config(std::size_t size = 32) {
  SegtranConfig c;
  c.image_size = size;
  c.channels = {4, 6, 8, 8};
  c.layers = 1;
  c.modes = 2;
  c.codebook = 4;
  c.seed = 5;
  return c;
}

Tensor<double> random_map(Shape s, Rng& rng) { return uniform_tensor<double>(std::move(s), -1, 1, rng); }

void zero_param(ParamStore<double>& store, ParamId id) {
  for (double& v : store.value(id).data()) v = 0;
}

void expect_all_near(const Tensor<double>& got, const Tensor<double>& want, double tol) {
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

}  // namespace

// ---------------------------------------------------------------- backbone

TEST(Backbone, SixtyFourInputGivesFourByFourTop) {
  SegtranConfig cfg;
  auto model = build_model<double>(cfg);
  Rng rng(1);
  Graph<double> g(model.params, false);
  auto f = backbone_forward(g, g.input(random_map({1, 64, 64}, rng)), model.backbone);
  EXPECT_EQ(f.f1.shape(), (Shape{16, 32, 32}));
  EXPECT_EQ(f.f2.shape(), (Shape{32, 16, 16}));
  EXPECT_EQ(f.f3.shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(f.f4.shape(), (Shape{64, 4, 4}));
}

TEST(Backbone, SixteenInputGivesSingleCell) {
  auto model = build_model<double>(small_config(16));
  Rng rng(2);
  Graph<double> g(model.params, false);
  auto f = backbone_forward(g, g.input(random_map({1, 16, 16}, rng)), model.backbone);
  EXPECT_EQ(f.f4.shape(), (Shape{8, 1, 1}));
}

TEST(Backbone, IndivisibleExtentIsConfigErrorNamingIt) {
  auto model = build_model<double>(small_config(32));
  Graph<double> g(model.params, false);
  try {
    backbone_forward(g, g.input(Tensor<double>({1, 40, 40})), model.backbone);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("40"), std::string::npos) << e.what();
  }
  EXPECT_THROW(backbone_forward(g, g.input(Tensor<double>({1, 32, 24})), model.backbone), ConfigError);
  try {
    build_model<double>(small_config(40));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("40"), std::string::npos) << e.what();
  }
}

TEST(Backbone, FortyEightIsAMultipleOfSixteen) {
  auto model = build_model<double>(small_config(48));
  Graph<double> g(model.params, false);
  auto f = backbone_forward(g, g.input(Tensor<double>({1, 48, 48})), model.backbone);
  EXPECT_EQ(f.f4.shape(), (Shape{8, 3, 3}));
}

TEST(Backbone, MatchesConvOracleChain) {
  auto model = build_model<double>(small_config(16));
  Rng rng(3);
  auto image = random_map({1, 16, 16}, rng);
  Graph<double> g(model.params, false);
  auto f = backbone_forward(g, g.input(image), model.backbone);
  Tensor<double> x = image;
  std::vector<Tensor<double>> want;
  for (const auto& stage : model.backbone.stages) {
    for (const ConvParams* c : {&stage.down, &stage.refine}) {
      x = oracle::conv_bias(x, model.params.value(c->kernel), model.params.value(c->bias), c->stride, c->pad);
      for (double& v : x.data()) v = oracle::silu(v);
    }
    want.push_back(x);
  }
  expect_all_near(f.f1.value(), want[0], 1e-12);
  expect_all_near(f.f4.value(), want[3], 1e-12);
}

// ---------------------------------------------------------------- input pyramid

TEST(InputFpn, ZeroTopMapLeavesAlignedF3) {
  auto model = build_model<double>(small_config());
  auto& store = model.params;
  // conv34 as the identity on the shared channels.
  Tensor<double>& k = store.value(model.conv34.kernel);
  for (double& v : k.data()) v = 0;
  for (std::size_t c = 0; c < 8; ++c) k[c * 8 + c] = 1;
  zero_param(store, model.conv34.bias);
  Rng rng(4);
  auto f3 = random_map({8, 4, 4}, rng);
  Graph<double> g(store, false);
  auto f34 = input_fpn(g, g.input(f3), g.input(Tensor<double>({8, 2, 2})), model.conv34);
  EXPECT_EQ(f34.value(), f3);
}

TEST(InputFpn, ZeroF3GivesUpsampledTop) {
  auto model = build_model<double>(small_config());
  zero_param(model.params, model.conv34.bias);
  Rng rng(5);
  auto f4 = random_map({8, 2, 2}, rng);
  Graph<double> g(model.params, false);
  auto f34 = input_fpn(g, g.input(Tensor<double>({8, 4, 4})), g.input(f4), model.conv34);
  expect_all_near(f34.value(), oracle::upsample(f4, 2), 1e-15);
}

TEST(InputFpn, RandomInstanceMatchesOracle) {
  auto model = build_model<double>(small_config());
  Rng rng(6);
  auto f3 = random_map({8, 4, 4}, rng), f4 = random_map({8, 2, 2}, rng);
  Graph<double> g(model.params, false);
  auto f34 = input_fpn(g, g.input(f3), g.input(f4), model.conv34);
  auto want = oracle::plus(oracle::upsample(f4, 2),
                           oracle::conv_bias(f3, model.params.value(model.conv34.kernel),
                                             model.params.value(model.conv34.bias), 1, 0));
  expect_all_near(f34.value(), want, 1e-14);
}

TEST(InputFpn, ChannelMisconfigurationIsDimensionError) {
  auto model = build_model<double>(small_config());
  Graph<double> g(model.params, false);
  EXPECT_THROW(input_fpn(g, g.input(Tensor<double>({5, 4, 4})), g.input(Tensor<double>({8, 2, 2})), model.conv34),
               DimensionError);
  EXPECT_THROW(input_fpn(g, g.input(Tensor<double>({8, 4, 4})), g.input(Tensor<double>({6, 2, 2})), model.conv34),
               DimensionError);
}

// ---------------------------------------------------------------- flatten

TEST(Flatten, NoEncodingIsInvertibleReshape) {
  Rng rng(7);
  auto f34 = random_map({8, 8, 8}, rng);
  ParamStore<double> store;
  PeParams pe{PeKind::none, 8, 8, 8, {}, 0};
  Graph<double> g(store, false);
  auto units = flatten_with_pe(g, g.input(f34), pe);
  EXPECT_EQ(units.shape(), (Shape{64, 8}));  // 64×64 image → 8×8 grid → 64 units
  EXPECT_EQ(unflatten(units, 8, 8).value(), f34);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(units.value().at(r * 8 + c, 3), f34.at(3, r, c));
}

TEST(Flatten, UnitCarriesEncodingOfItsGridCell) {
  Rng rng(8);
  ParamStore<double> store;
  auto pe = make_pe(store, PeKind::learnable, 8, 8, 8, rng);
  auto f34 = random_map({8, 8, 8}, rng);
  Graph<double> g(store, false);
  auto units = flatten_with_pe(g, g.input(f34), pe).value();
  const auto& a = store.value(pe.weights.a);
  const auto& b = store.value(pe.weights.b);
  const auto& c = store.value(pe.weights.c);
  for (auto [r, col] : {std::pair<std::size_t, std::size_t>{0, 0}, {3, 5}, {7, 2}}) {
    const double x = col / 7.0, y = r / 7.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double phase = a[i] * x + b[i] * y + c[i];
      const double enc = i < 4 ? std::sin(phase) : std::cos(phase);
      EXPECT_NEAR(units.at(r * 8 + col, i), f34.at(i, r, col) + enc, 1e-14);
    }
  }
}

TEST(Flatten, EncodingWidthMismatchIsConfigError) {
  Rng rng(9);
  ParamStore<double> store;
  auto pe = make_pe(store, PeKind::learnable, 4, 4, 6, rng);
  Graph<double> g(store, false);
  EXPECT_THROW(flatten_with_pe(g, g.input(Tensor<double>({8, 4, 4})), pe), ConfigError);
}

// ---------------------------------------------------------------- output pyramid

TEST(OutputFpn, ZeroLowLevelMapsGiveUpsampledG34) {
  auto model = build_model<double>(small_config());
  zero_param(model.params, model.conv12.bias);
  zero_param(model.params, model.conv24.bias);
  Rng rng(10);
  auto g34 = random_map({8, 4, 4}, rng);
  Graph<double> g(model.params, false);
  auto out = output_fpn(g, g.input(Tensor<double>({4, 16, 16})), g.input(Tensor<double>({6, 8, 8})), g.input(g34),
                        model.conv12, model.conv24);
  EXPECT_EQ(out.shape(), (Shape{8, 16, 16}));  // 1/2 of a 32×32 input
  expect_all_near(out.value(), oracle::upsample(g34, 4), 1e-15);
}

TEST(OutputFpn, RandomInstanceMatchesComposedOracle) {
  auto model = build_model<double>(small_config());
  const auto& s = model.params;
  Rng rng(11);
  auto f1 = random_map({4, 16, 16}, rng), f2 = random_map({6, 8, 8}, rng), g34 = random_map({8, 4, 4}, rng);
  Graph<double> g(model.params, false);
  auto out = output_fpn(g, g.input(f1), g.input(f2), g.input(g34), model.conv12, model.conv24);
  auto f12 = oracle::plus(oracle::upsample(f2, 2),
                          oracle::conv_bias(f1, s.value(model.conv12.kernel), s.value(model.conv12.bias), 1, 0));
  auto want = oracle::plus(oracle::upsample(g34, 4),
                           oracle::conv_bias(f12, s.value(model.conv24.kernel), s.value(model.conv24.bias), 1, 0));
  expect_all_near(out.value(), want, 1e-13);
}

TEST(OutputFpn, SixtyFourInputGivesHalfScale) {
  SegtranConfig cfg;
  auto model = build_model<double>(cfg);
  Graph<double> g(model.params, false);
  auto out = output_fpn(g, g.input(Tensor<double>({16, 32, 32})), g.input(Tensor<double>({32, 16, 16})),
                        g.input(Tensor<double>({64, 8, 8})), model.conv12, model.conv24);
  EXPECT_EQ(out.shape(), (Shape{64, 32, 32}));
}

TEST(OutputFpn, ShapeMismatchIsDimensionError) {
  auto model = build_model<double>(small_config());
  Graph<double> g(model.params, false);
  EXPECT_THROW(output_fpn(g, g.input(Tensor<double>({4, 16, 16})), g.input(Tensor<double>({6, 8, 8})),
                          g.input(Tensor<double>({8, 3, 3})), model.conv12, model.conv24),
               DimensionError);
}

// ---------------------------------------------------------------- head

TEST(SegHead, ZeroWeightsGiveBiasPerClass) {
  auto model = build_model<double>(small_config());
  zero_param(model.params, model.head.kernel);
  model.params.value(model.head.bias) = Tensor<double>({3}, {0.5, -1.0, 2.0});
  Rng rng(12);
  Graph<double> g(model.params, false);
  auto logits = seg_head(g, g.input(random_map({8, 16, 16}, rng)), model.head).value();
  EXPECT_EQ(logits.shape(), (Shape{3, 32, 32}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32 * 32; ++i) EXPECT_NEAR(logits[c * 1024 + i], model.params.value(model.head.bias)[c], 1e-15);
}

TEST(SegHead, RandomInstanceMatchesOracle) {
  auto model = build_model<double>(small_config());
  Rng rng(13);
  auto g1234 = random_map({8, 16, 16}, rng);
  Graph<double> g(model.params, false);
  auto logits = seg_head(g, g.input(g1234), model.head).value();
  auto want = oracle::upsample(oracle::conv_bias(g1234, model.params.value(model.head.kernel),
                                                 model.params.value(model.head.bias), 1, 0),
                               2);
  expect_all_near(logits, want, 1e-14);
}

// ---------------------------------------------------------------- full model

TEST(SegtranForward, DefaultShapeLaw) {
  SegtranConfig cfg;
  auto model = build_model<float>(cfg);
  EXPECT_EQ(cfg.width(), 64u);
  Rng rng(14);
  Graph<float> g(model.params, false);
  g.hooks().record_attention = true;
  auto logits = segtran_forward(g, g.input(uniform_tensor<float>({1, 64, 64}, 0, 1, rng)), model);
  EXPECT_EQ(logits.shape(), (Shape{3, 64, 64}));
  // Transformer runs at 1/8 scale: 64 units, codebook 16.
  for (const auto& [rows, cols] : g.hooks().attention_shapes) {
    EXPECT_TRUE((rows == 16 && cols == 64) || (rows == 64 && cols == 16)) << rows << "x" << cols;
  }
  EXPECT_EQ(g.hooks().attention_shapes.size(), 3u * (1 + 4));
}

TEST(SegtranForward, CnnOnlySharesBackboneAndPyramidShapes) {
  SegtranConfig full = small_config(), cnn = small_config();
  cnn.cnn_only = true;
  auto a = build_model<double>(full), b = build_model<double>(cnn);
  EXPECT_TRUE(b.transformer.empty());
  for (ParamId i = 0; i < b.params.size(); ++i) {
    auto id = a.params.find(b.params.name(i));
    ASSERT_TRUE(id.has_value()) << b.params.name(i);
    EXPECT_EQ(a.params.value(*id).shape(), b.params.value(i).shape()) << b.params.name(i);
  }
  EXPECT_GT(a.params.element_count(), b.params.element_count());
}

TEST(SegtranForward, CnnOnlyMatchesPipelineWithoutTransformer) {
  SegtranConfig cfg = small_config();
  cfg.cnn_only = true;
  auto model = build_model<double>(cfg);
  Rng rng(15);
  auto image = random_map({1, 32, 32}, rng);
  Graph<double> g(model.params, false);
  auto logits = segtran_forward(g, g.input(image), model).value();
  auto f = backbone_forward(g, g.input(image), model.backbone);
  auto f34 = input_fpn(g, f.f3, f.f4, model.conv34);
  auto want = seg_head(g, output_fpn(g, f.f1, f.f2, f34, model.conv12, model.conv24), model.head).value();
  EXPECT_EQ(logits, want);
}

TEST(SegtranForward, ThreeChannelInput) {
  SegtranConfig cfg = small_config();
  cfg.in_channels = 3;
  auto model = build_model<double>(cfg);
  EXPECT_EQ(model.params.value(model.backbone.stages[0].down.kernel).shape(), (Shape{4, 3, 3, 3}));
  auto sample = gen_synthetic(1, cfg.task, 32, 32, 3);
  Graph<double> g(model.params, false);
  EXPECT_EQ(segtran_forward(g, g.input(model_input<double>(sample, 3)), model).shape(), (Shape{3, 32, 32}));
}

TEST(SegtranForward, EveryTransformerVariantBuildsAndRuns) {
  for (auto kind : {TransformerKind::squeeze_expand, TransformerKind::squeeze_single, TransformerKind::expand_only,
                    TransformerKind::mha}) {
    for (auto pe : {PeKind::none, PeKind::fixed, PeKind::discrete, PeKind::learnable}) {
      SegtranConfig cfg = small_config();
      cfg.transformer = kind;
      cfg.pe = pe;
      cfg.heads = 2;
      auto model = build_model<float>(cfg);
      Graph<float> g(model.params, false);
      Rng rng(16);
      auto logits = segtran_forward(g, g.input(uniform_tensor<float>({1, 32, 32}, 0, 1, rng)), model);
      EXPECT_EQ(logits.shape(), (Shape{3, 32, 32}));
      EXPECT_TRUE(logits.value().all_finite());
    }
  }
}

TEST(SegtranForward, SameSeedBuildsIdenticalModels) {
  auto a = build_model<float>(small_config()), b = build_model<float>(small_config());
  EXPECT_TRUE(a.params == b.params);
  SegtranConfig other = small_config();
  other.seed = 6;
  EXPECT_FALSE(a.params == build_model<float>(other).params);
}
