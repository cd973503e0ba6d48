#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <new>

#include "segtran/segtran.hpp"

using namespace segtran;

// Largest single heap request while tracking is on.
namespace {
std::atomic<bool> g_track{false};
std::atomic<std::size_t> g_largest{0};
}  // namespace

void* operator new(std::size_t n) {
  if (g_track.load(std::memory_order_relaxed)) {
    std::size_t prev = g_largest.load();
    while (n > prev && !g_largest.compare_exchange_weak(prev, n)) {
    }
  }
  if (void* p = std::malloc(n ? n : 1)) return p;
  throw std::bad_alloc();
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { ::operator delete(p); }

namespace {

// ---------------------------------------------------------------- oracle

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t t = 0; t < b.size(); ++t) c[i][j] += a[i][t] * b[t][j];
  return c;
}

Mat tr(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) c[i][j] += b[i][j];
  return c;
}

Mat row_softmax(Mat s) {
  for (auto& row : s) {
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (double& v : row) z += (v = std::exp(v - mx));
    for (double& v : row) v /= z;
  }
  return s;
}

Mat affine(const Mat& x, const ParamStore<double>& s, const LinearParams& p) {
  Mat y = mm(x, to_mat(s.value(p.weight)));
  const auto& b = s.value(p.bias);
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return y;
}

Mat ffn_oracle(const Mat& x, const ParamStore<double>& s, const FfnParams& p) {
  Mat h = affine(x, s, p.hidden);
  for (auto& row : h)
    for (double& v : row) v = v / (1 + std::exp(-v));
  return affine(h, s, p.out);
}

Mat ln_oracle(const Mat& x, const ParamStore<double>& s, const LayerNormParams& p) {
  Mat y = x;
  const auto& gamma = s.value(p.gamma);
  const auto& beta = s.value(p.beta);
  for (auto& row : y) {
    const double n = static_cast<double>(row.size());
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= n;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * gamma[j] + beta[j];
  }
  return y;
}

Mat tied_oracle(const Mat& xq, const Mat& xkv, const ParamStore<double>& s, const SingleHeadParams& p) {
  const Mat w = to_mat(s.value(p.w_kq));
  Mat scores = mm(mm(xq, w), tr(mm(xkv, w)));
  for (auto& row : scores)
    for (double& v : row) v /= std::sqrt(static_cast<double>(p.width));
  return mm(row_softmax(scores), mm(xkv, to_mat(s.value(p.w_v))));
}

Mat residual_block(const Mat& x, const Mat& att, const ParamStore<double>& s, const FfnParams& f,
                   const std::optional<LayerNormParams>& n1, const std::optional<LayerNormParams>& n2) {
  if (!n1) return ffn_oracle(att, s, f);
  Mat h = ln_oracle(plus(x, att), s, *n1);
  return ln_oracle(plus(h, ffn_oracle(h, s, f)), s, *n2);
}

Mat single_head_oracle(const Mat& xq, const Mat& xkv, const ParamStore<double>& s, const SingleHeadParams& p) {
  return residual_block(xq, tied_oracle(xq, xkv, s, p), s, p.ffn, p.norm1, p.norm2);
}

Mat eab_oracle(const Mat& xq, const Mat& xkv, const ParamStore<double>& s, const EabParams& p) {
  std::vector<Mat> outs;
  Mat logits(xq.size());
  for (std::size_t k = 0; k < p.modes.size(); ++k) {
    outs.push_back(single_head_oracle(xq, xkv, s, p.modes[k]));
    Mat b = affine(outs.back(), s, p.gates[k]);
    for (std::size_t u = 0; u < xq.size(); ++u) logits[u].push_back(b[u][0]);
  }
  Mat gate = row_softmax(logits);
  Mat out(xq.size(), std::vector<double>(xq[0].size(), 0.0));
  for (std::size_t u = 0; u < xq.size(); ++u)
    for (std::size_t k = 0; k < outs.size(); ++k)
      for (std::size_t j = 0; j < out[u].size(); ++j) out[u][j] += gate[u][k] * outs[k][u][j];
  return out;
}

void expect_close(const Tensor<double>& got, const Mat& want, double tol) {
  ASSERT_EQ(got.dim(0), want.size());
  ASSERT_EQ(got.dim(1), want[0].size());
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[0].size(); ++j) EXPECT_NEAR(got.at(i, j), want[i][j], tol) << i << "," << j;
}

template <Real T>
Tensor<T> random_units(std::size_t n, std::size_t c, Rng& rng) {
  return uniform_tensor<T>({n, c}, -1, 1, rng);
}

}  // namespace

// ---------------------------------------------------------------- tied attention

TEST(TiedAttention, SelfAttentionScoresAreSymmetric) {
  Rng rng(1);
  ParamStore<float> store;
  auto p = make_single_head(store, "h", 16, true, rng);
  Graph<float> g(store, false);
  auto x = g.constant(random_units<float>(10, 16, rng));
  auto s = attention_logits(g, x, x, p).value();
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j) EXPECT_LT(std::abs(s.at(i, j) - s.at(j, i)), 1e-6f);
}

TEST(TiedAttentionProperty, SymmetryOverRandomInstancesSinglePrecision) {
  Rng rng(100);
  std::uniform_int_distribution<std::size_t> units(1, 40);
  for (int trial = 0; trial < 100; ++trial) {
    ParamStore<float> store;
    auto p = make_single_head(store, "h", 8 * (1 + trial % 4), false, rng);
    Graph<float> g(store, false);
    const std::size_t n = units(rng);
    auto x = g.constant(uniform_tensor<float>({n, p.width}, -3, 3, rng));
    auto s = attention_logits(g, x, x, p).value();
    float worst = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(s.at(i, j) - s.at(j, i)));
    EXPECT_LT(worst, 1e-6f) << "trial " << trial;
  }
}

TEST(TiedAttention, SingleQueryIsConvexCombinationOfValues) {
  Rng rng(2);
  ParamStore<double> store;
  auto p = make_single_head(store, "h", 4, false, rng);
  Graph<double> g(store, false);
  g.hooks().record_attention = true;
  auto xq = g.constant(random_units<double>(1, 4, rng));
  auto xkv = g.constant(random_units<double>(5, 4, rng));
  tied_attention(g, xq, xkv, p);
  ASSERT_EQ(g.hooks().attention_weights.size(), 1u);
  const auto& a = g.hooks().attention_weights[0];
  EXPECT_EQ(a.shape(), (Shape{1, 5}));
  double total = 0;
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    total += v;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(TiedAttention, MatchesFormulaOracle) {
  Rng rng(3);
  ParamStore<double> store;
  auto p = make_single_head(store, "h", 4, false, rng);
  auto xv = random_units<double>(3, 4, rng);
  Graph<double> g(store, false);
  auto x = g.constant(xv);
  expect_close(tied_attention(g, x, x, p).value(), tied_oracle(to_mat(xv), to_mat(xv), store, p), 1e-14);
}

TEST(TiedAttention, ChannelMismatchIsDimensionError) {
  Rng rng(4);
  ParamStore<double> store;
  auto p = make_single_head(store, "h", 4, false, rng);
  Graph<double> g(store, false);
  auto x = g.constant(random_units<double>(3, 5, rng));
  EXPECT_THROW(tied_attention(g, x, x, p), DimensionError);
}

// ---------------------------------------------------------------- ffn

TEST(Ffn, ZeroWeightsGiveZeroOutput) {
  Rng rng(5);
  ParamStore<double> store;
  auto p = make_ffn(store, "f", 4, rng);
  for (ParamId i = 0; i < store.size(); ++i)
    for (double& v : store.value(i).data()) v = 0;
  Graph<double> g(store, false);
  EXPECT_EQ(ffn(g, g.constant(random_units<double>(3, 4, rng)), p).value(), Tensor<double>({3, 4}));
}

TEST(Ffn, RowPermutationCommutes) {
  Rng rng(6);
  ParamStore<double> store;
  auto p = make_ffn(store, "f", 4, rng);
  auto xv = random_units<double>(5, 4, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Graph<double> g(store, false);
  auto y = ffn(g, g.constant(xv), p).value();
  auto yp = ffn(g, gather_rows(g.constant(xv), perm), p).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(yp.at(i, j), y.at(perm[i], j));
}

TEST(Ffn, MatchesFormulaOracle) {
  Rng rng(7);
  ParamStore<double> store;
  auto p = make_ffn(store, "f", 6, rng);
  EXPECT_EQ(store.value(p.hidden.weight).shape(), (Shape{6, 12}));
  auto xv = random_units<double>(4, 6, rng);
  Graph<double> g(store, false);
  expect_close(ffn(g, g.constant(xv), p).value(), ffn_oracle(to_mat(xv), store, p), 1e-14);
}

// ---------------------------------------------------------------- single head layer

TEST(SingleHeadLayer, ShapeLaw) {
  Rng rng(8);
  ParamStore<double> store;
  auto p = make_single_head(store, "h", 8, true, rng);
  Graph<double> g(store, false);
  auto kv = g.constant(random_units<double>(9, 8, rng));
  for (std::size_t n : {1u, 7u, 64u}) {
    auto y = single_head_layer(g, g.constant(random_units<double>(n, 8, rng)), kv, p);
    EXPECT_EQ(y.shape(), (Shape{n, 8}));
  }
}

TEST(SingleHeadLayer, MatchesFormulaOracleWithAndWithoutNorm) {
  for (bool norm : {true, false}) {
    Rng rng(9);
    ParamStore<double> store;
    auto p = make_single_head(store, "h", 6, norm, rng);
    if (norm) {
      for (double& v : store.value(p.norm1->gamma).data()) v = 0.5 + v;
      store.value(p.norm2->beta)[1] = 0.3;
    }
    auto q = random_units<double>(4, 6, rng), kv = random_units<double>(7, 6, rng);
    Graph<double> g(store, false);
    expect_close(single_head_layer(g, g.constant(q), g.constant(kv), p).value(),
                 single_head_oracle(to_mat(q), to_mat(kv), store, p), 1e-12);
  }
}

TEST(SingleHeadLayer, GradientCheckSmallInstance) {
  Rng rng(10);
  ParamStore<double> store;
  auto p = make_single_head(store, "h", 8, true, rng);
  auto xv = random_units<double>(4, 8, rng), probe = random_units<double>(4, 8, rng);
  auto report = grad_check(
      [&](Graph<double>& g) {
        auto x = g.constant(xv);
        return sum(mul(single_head_layer(g, x, x, p), g.constant(probe)));
      },
      store);
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(SingleHeadLayer, Deterministic) {
  Rng rng(11);
  ParamStore<float> store;
  auto p = make_single_head(store, "h", 16, true, rng);
  auto xv = random_units<float>(20, 16, rng);
  auto run = [&] {
    Graph<float> g(store, false);
    auto x = g.constant(xv);
    return single_head_layer(g, x, x, p).value();
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------- expanded block

TEST(Eab, SingleModeEqualsSingleHeadLayer) {
  Rng rng(12);
  ParamStore<double> store;
  auto p = make_eab(store, "e", 8, 1, true, rng);
  auto xv = random_units<double>(6, 8, rng);
  Graph<double> g(store, false);
  auto x = g.constant(xv);
  auto a = eab(g, x, x, p).value(), b = single_head_layer(g, x, x, p.modes[0]).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  EXPECT_EQ(a, b);
}

TEST(Eab, GateRowsSumToOne) {
  Rng rng(13);
  ParamStore<double> store;
  auto p = make_eab(store, "e", 8, 4, true, rng);
  Graph<double> g(store, false);
  g.hooks().record_attention = true;
  auto x = g.constant(random_units<double>(10, 8, rng));
  eab(g, x, x, p);
  ASSERT_EQ(g.hooks().mode_gates.size(), 1u);
  const auto& gate = g.hooks().mode_gates[0];
  EXPECT_EQ(gate.shape(), (Shape{10, 4}));
  for (std::size_t u = 0; u < 10; ++u) {
    double total = 0;
    for (std::size_t k = 0; k < 4; ++k) total += gate.at(u, k);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Eab, HandSetTwoModesMatchFormulaOracle) {
  Rng rng(14);
  ParamStore<double> store;
  auto p = make_eab(store, "e", 2, 2, false, rng);
  // Hand-set tied projections, value maps and gates; FFN weights stay random.
  store.value(p.modes[0].w_kq) = Tensor<double>({2, 2}, {1, 0, 0, 1});
  store.value(p.modes[0].w_v) = Tensor<double>({2, 2}, {0.5, -1, 2, 0.25});
  store.value(p.modes[1].w_kq) = Tensor<double>({2, 2}, {0, 1, -1, 0.5});
  store.value(p.modes[1].w_v) = Tensor<double>({2, 2}, {1, 1, 0, -1});
  store.value(p.gates[0].weight) = Tensor<double>({2, 1}, {1, -1});
  store.value(p.gates[0].bias) = Tensor<double>({1}, {0.2});
  store.value(p.gates[1].weight) = Tensor<double>({2, 1}, {-0.5, 2});
  store.value(p.gates[1].bias) = Tensor<double>({1}, {0.0});
  Tensor<double> xv({2, 2}, {0.3, -0.7, 1.1, 0.4});
  Graph<double> g(store, false);
  auto x = g.constant(xv);
  expect_close(eab(g, x, x, p).value(), eab_oracle(to_mat(xv), to_mat(xv), store, p), 1e-14);
}

TEST(Eab, RandomModesWithNormMatchFormulaOracle) {
  Rng rng(15);
  ParamStore<double> store;
  auto p = make_eab(store, "e", 4, 3, true, rng);
  auto q = random_units<double>(5, 4, rng), kv = random_units<double>(3, 4, rng);
  Graph<double> g(store, false);
  expect_close(eab(g, g.constant(q), g.constant(kv), p).value(), eab_oracle(to_mat(q), to_mat(kv), store, p), 1e-12);
}

TEST(Eab, ZeroModesIsConfigError) {
  Rng rng(16);
  ParamStore<double> store;
  EXPECT_THROW(make_eab(store, "e", 4, 0, true, rng), ConfigError);
  Graph<double> g(store, false);
  auto x = g.constant(Tensor<double>({2, 4}));
  EXPECT_THROW(eab(g, x, x, EabParams{}), ConfigError);
}

TEST(Eab, ParameterCountGrowsLinearlyInModes) {
  std::vector<std::size_t> counts;
  for (std::size_t modes = 1; modes <= 5; ++modes) {
    Rng rng(0);
    ParamStore<double> store;
    make_eab(store, "e", 8, modes, true, rng);
    counts.push_back(store.element_count());
  }
  // Per mode: w_kq, w_v (2·C²), FFN (C·2C + 2C + 2C·C + C), two norms (4C), gate (C + 1).
  const std::size_t c = 8, per_mode = 2 * c * c + (2 * c * c + 2 * c + 2 * c * c + c) + 4 * c + c + 1;
  for (std::size_t i = 0; i < counts.size(); ++i) EXPECT_EQ(counts[i], (i + 1) * per_mode);
}

TEST(Eab, KnockoutDropsOneModeFromGate) {
  Rng rng(17);
  ParamStore<double> store;
  auto p = make_eab(store, "e", 4, 3, true, rng);
  auto xv = random_units<double>(5, 4, rng);
  Graph<double> g(store, false);
  g.hooks().record_attention = true;
  g.hooks().knockout_mode = 1;
  auto x = g.constant(xv);
  auto y = eab(g, x, x, p).value();
  EXPECT_EQ(g.hooks().mode_gates[0].shape(), (Shape{5, 2}));
  EabParams kept{{p.modes[0], p.modes[2]}, {p.gates[0], p.gates[2]}};
  expect_close(y, eab_oracle(to_mat(xv), to_mat(xv), store, kept), 1e-12);
}

// ---------------------------------------------------------------- squeezed block

TEST(Sab, AttentionShapesAreMByNThenNByM) {
  Rng rng(18);
  ParamStore<double> store;
  auto p = make_sab(store, "s", 8, 4, 2, true, rng);
  Graph<double> g(store, false);
  g.hooks().record_attention = true;
  auto y = sab(g, g.constant(random_units<double>(16, 8, rng)), p);
  EXPECT_EQ(y.shape(), (Shape{16, 8}));
  const auto& shapes = g.hooks().attention_shapes;
  ASSERT_EQ(shapes.size(), 3u);  // squeeze step, then one per expanded mode
  EXPECT_EQ(shapes[0], std::make_pair(std::size_t{4}, std::size_t{16}));
  EXPECT_EQ(shapes[1], std::make_pair(std::size_t{16}, std::size_t{4}));
  EXPECT_EQ(shapes[2], std::make_pair(std::size_t{16}, std::size_t{4}));
}

TEST(Sab, SingleUnitInput) {
  Rng rng(19);
  ParamStore<double> store;
  auto p = make_sab(store, "s", 8, 4, 2, true, rng);
  Graph<double> g(store, false);
  auto y = sab(g, g.constant(random_units<double>(1, 8, rng)), p);
  EXPECT_EQ(y.shape(), (Shape{1, 8}));
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Sab, MatchesComposedOracle) {
  Rng rng(20);
  ParamStore<double> store;
  auto p = make_sab(store, "s", 4, 3, 2, true, rng);
  auto xv = random_units<double>(6, 4, rng);
  const Mat squeezed = single_head_oracle(to_mat(store.value(p.codebook)), to_mat(xv), store, p.squeeze);
  Graph<double> g(store, false);
  expect_close(sab(g, g.constant(xv), p).value(), eab_oracle(to_mat(xv), squeezed, store, p.expand), 1e-12);
}

TEST(Sab, GradientCheckThroughBothSteps) {
  Rng rng(22);
  ParamStore<double> store;
  auto p = make_sab(store, "s", 4, 3, 2, true, rng);
  auto xv = random_units<double>(6, 4, rng), probe = random_units<double>(6, 4, rng);
  auto report = grad_check([&](Graph<double>& g) { return sum(mul(sab(g, g.constant(xv), p), g.constant(probe))); }, store);
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(Sab, NeverAllocatesQuadraticBuffer) {
  for (std::size_t n : {64u, 256u}) {
    Rng rng(22);
    ParamStore<float> store;
    // Width 16 keeps every per-unit buffer (N×C, N×2C) below N².
    auto p = make_sab(store, "s", 16, 16, 4, true, rng);
    auto xv = random_units<float>(n, 16, rng);
    Graph<float> g(store, true);
    g.hooks().record_attention = true;
    auto x = g.constant(xv);
    g_largest = 0;
    g_track = true;
    auto y = sab(g, x, p);
    g.tape().backward(sum(y));
    g_track = false;
    for (const auto& [rows, cols] : g.hooks().attention_shapes) {
      EXPECT_TRUE((rows == 16 && cols == n) || (rows == n && cols == 16)) << rows << "x" << cols;
    }
    EXPECT_EQ(g.hooks().largest_attention, 16 * n);
    EXPECT_LT(g_largest.load(), n * n * sizeof(float)) << "largest request " << g_largest.load();
  }
}

// ---------------------------------------------------------------- multi-head

TEST(Mha, ShapeLawAndDivisibility) {
  Rng rng(23);
  ParamStore<double> store;
  auto p = make_mha(store, "m", 8, 4, true, rng);
  Graph<double> g(store, false);
  EXPECT_EQ(mha_layer(g, g.constant(random_units<double>(9, 8, rng)), p).shape(), (Shape{9, 8}));
  EXPECT_THROW(make_mha(store, "bad", 8, 3, true, rng), ConfigError);
}

TEST(Mha, OneHeadIsUntiedSingleHeadLayer) {
  Rng rng(24);
  ParamStore<double> store;
  auto p = make_mha(store, "m", 6, 1, true, rng);
  auto xv = random_units<double>(5, 6, rng);
  const Mat x = to_mat(xv);
  Mat s = mm(mm(x, to_mat(store.value(p.w_q[0]))), tr(mm(x, to_mat(store.value(p.w_k[0])))));
  for (auto& row : s)
    for (double& v : row) v /= std::sqrt(6.0);
  const Mat att = affine(mm(row_softmax(s), mm(x, to_mat(store.value(p.w_v[0])))), store, p.out);
  Graph<double> g(store, false);
  expect_close(mha_layer(g, g.constant(xv), p).value(), residual_block(x, att, store, p.ffn, p.norm1, p.norm2), 1e-12);
}

TEST(Mha, GradientCheckSmallInstance) {
  Rng rng(25);
  ParamStore<double> store;
  auto p = make_mha(store, "m", 8, 2, true, rng);
  auto xv = random_units<double>(5, 8, rng), probe = random_units<double>(5, 8, rng);
  auto report = grad_check([&](Graph<double>& g) { return sum(mul(mha_layer(g, g.constant(xv), p), g.constant(probe))); },
                           store);
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

// ---------------------------------------------------------------- stacks

TEST(Stack, ThreeLayersPreserveShape) {
  Rng rng(26);
  ParamStore<float> store;
  std::vector<TransformerLayer> layers;
  for (int i = 0; i < 3; ++i) layers.push_back(make_sab(store, "l" + std::to_string(i), 32, 16, 4, true, rng));
  Graph<float> g(store, false);
  EXPECT_EQ(stack_layers<float>(g, g.constant(random_units<float>(64, 32, rng)), layers).shape(), (Shape{64, 32}));
}

TEST(Stack, OneLayerEqualsSingleSabCall) {
  Rng rng(27);
  ParamStore<double> store;
  std::vector<TransformerLayer> layers{make_sab(store, "l0", 8, 4, 2, true, rng)};
  Graph<double> g(store, false);
  auto x = g.constant(random_units<double>(12, 8, rng));
  EXPECT_EQ(stack_layers<double>(g, x, layers).value(), sab(g, x, std::get<SabParams>(layers[0])).value());
}

TEST(Stack, EmptyOrTooDeepIsConfigError) {
  Rng rng(28);
  ParamStore<double> store;
  Graph<double> g(store, false);
  auto x = g.constant(random_units<double>(4, 8, rng));
  EXPECT_THROW(stack_layers<double>(g, x, {}), ConfigError);
  std::vector<TransformerLayer> five;
  for (int i = 0; i < 5; ++i) five.push_back(make_eab(store, "l" + std::to_string(i), 8, 1, true, rng));
  Graph<double> g2(store, false);
  EXPECT_THROW(stack_layers<double>(g2, g2.constant(random_units<double>(4, 8, rng)), five), ConfigError);
}

TEST(Stack, DeterministicAcrossReruns) {
  Rng rng(29);
  ParamStore<float> store;
  std::vector<TransformerLayer> layers{make_sab(store, "a", 16, 8, 2, true, rng), make_mha(store, "b", 16, 4, true, rng)};
  auto xv = random_units<float>(30, 16, rng);
  auto run = [&] {
    Graph<float> g(store, false);
    return stack_layers<float>(g, g.constant(xv), layers).value();
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------- properties

TEST(AttentionProperty, AllAttentionRowsSumToOne) {
  Rng rng(30);
  ParamStore<float> store;
  std::vector<TransformerLayer> layers{make_sab(store, "a", 16, 8, 3, true, rng), make_mha(store, "b", 16, 4, true, rng),
                                       make_eab(store, "c", 16, 2, true, rng)};
  Graph<float> g(store, false);
  g.hooks().record_attention = true;
  stack_layers<float>(g, g.constant(random_units<float>(25, 16, rng)), layers);
  EXPECT_EQ(g.hooks().attention_weights.size(), 1u + 3u + 4u + 2u);
  EXPECT_EQ(g.hooks().mode_gates.size(), 2u);
  auto check = [](const Tensor<float>& m) {
    for (std::size_t i = 0; i < m.dim(0); ++i) {
      double total = 0;
      for (std::size_t j = 0; j < m.dim(1); ++j) total += m.at(i, j);
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  };
  for (const auto& a : g.hooks().attention_weights) check(a);
  for (const auto& gate : g.hooks().mode_gates) check(gate);
}

TEST(AttentionProperty, PermutationEquivariance) {
  Rng rng(31);
  ParamStore<double> store;
  std::vector<TransformerLayer> layers{make_eab(store, "a", 8, 2, true, rng), make_mha(store, "b", 8, 2, true, rng),
                                       make_sab(store, "c", 8, 4, 2, true, rng)};
  auto xv = random_units<double>(7, 8, rng);
  const std::vector<std::size_t> perm{6, 2, 0, 5, 1, 3, 4};
  Graph<double> g(store, false);
  auto y = stack_layers<double>(g, g.constant(xv), layers).value();
  auto yp = stack_layers<double>(g, gather_rows(g.constant(xv), perm), layers).value();
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(yp.at(i, j), y.at(perm[i], j), 1e-12);
}
