#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cgh/pcd.hpp"
#include "test_util.hpp"

namespace cgh {
namespace {

using ad::Tape;
using ad::Var;

PcdWeights random_weights(std::size_t C, std::uint64_t seed, double scale = 0.3) {
  PcdWeights w = init_weights(C, 1, seed);
  Rng rng(derive_seed(seed, 5));
  w.for_each([&](const std::string& name, Tensor& t) {
    if (name.find("gamma") != std::string::npos) return;
    for (auto& v : t.re()) v = scale * rng.normal();
    if (t.is_complex())
      for (auto& v : t.im()) v = scale * rng.normal();
  });
  return w;
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.get(i) - b.get(i)));
  return m;
}

TEST(Fem, QuarterResolution) {
  const PcdWeights w = init_weights(32, 1, 1);
  const FeatureMap f = fem_forward(test::random_field(128, 128, 1), w);
  EXPECT_EQ(f.shape(), (Shape{32, 32, 32}));
  const FeatureMap z = fem_forward(ComplexField(128, 128, 8e-6), w);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z.get(i), cplx(0.0, 0.0));
}

TEST(Fem, RejectsIndivisibleInputWithPadHint) {
  const PcdWeights w = init_weights(4, 1, 1);
  try {
    fem_forward(test::random_field(100, 100, 1), w);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("128x128"), std::string::npos) << e.what();
  }
}

TEST(Offsets, ZeroQueriesAndShape) {
  const PcdWeights w = init_weights(8, 1, 2);
  const Tensor o0 = compute_offsets(FeatureMap({8, 32, 32}), w);
  EXPECT_EQ(o0.shape(), (Shape{2, 4, 4}));
  for (double v : o0.re()) EXPECT_EQ(v, 0.0);
  const Tensor o = compute_offsets(test::random_tensor({8, 32, 32}, 3), w);
  double mx = 0.0;
  for (double v : o.re()) mx = std::max(mx, std::abs(v));
  EXPECT_GT(mx, 0.0);
  EXPECT_EQ(w.blocks[0].off_pw.shape(), (Shape{2, 16, 1, 1}));
}

TEST(DeformableDownsample, ZeroOffsetsSampleCellCentres) {
  const FeatureMap f = test::random_tensor({3, 16, 16}, 4);
  const FeatureMap s = deformable_downsample(f, Tensor::real({2, 2, 2}));
  EXPECT_EQ(s.shape(), (Shape{3, 2, 2}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        const auto at = [&](std::size_t r, std::size_t col) { return f.get(c * 256 + r * 16 + col); };
        const std::size_t r = 8 * i + 3, col = 8 * j + 3;
        const cplx centre = 0.25 * (at(r, col) + at(r + 1, col) + at(r, col + 1) + at(r + 1, col + 1));
        EXPECT_LT(std::abs(s.get(c * 4 + i * 2 + j) - centre), 1e-14);
      }
}

TEST(DeformableDownsample, ConstantMapAndUnitShift) {
  FeatureMap f({2, 16, 16});
  for (std::size_t i = 0; i < f.size(); ++i) f.set(i, {1.5, -0.5});
  const Tensor off = test::random_tensor({2, 2, 2}, 5, false);
  const FeatureMap s = deformable_downsample(f, off);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_LT(std::abs(s.get(i) - cplx(1.5, -0.5)), 1e-14);

  const FeatureMap g = test::random_tensor({2, 16, 16}, 6);
  Tensor one = Tensor::real({2, 2, 2});
  one.re()[3] = 1.0;  // key (1,1): drow = +1
  const FeatureMap shifted = deformable_downsample(g, one);
  const auto ref = bilinear_sample(g, SampleGrid{{{ad::reference_coordinate(1, 8) + 1.0, ad::reference_coordinate(1, 8)}}});
  for (std::size_t c = 0; c < 2; ++c) EXPECT_LT(std::abs(shifted.get(c * 4 + 3) - ref[0][c]), 1e-14);
}

TEST(Cdsa, AttentionMatrixIsReducedBy64) {
  const PcdWeights w = init_weights(8, 1, 7);
  const CdsaResult r = cdsa_forward(test::random_tensor({8, 32, 32}, 8), w);
  EXPECT_EQ(r.attention.shape(), (Shape{1024, 16}));
  const AttentionGeometry g = AttentionGeometry::of(32, 32);
  EXPECT_EQ(g.rate(), 64u);
  EXPECT_EQ(g.keys() * 64, g.queries());
  for (std::size_t i = 0; i < 1024; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      const double a = r.attention.re()[i * 16 + j];
      EXPECT_GE(a, 0.0);
      s += a;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(AttentionGeometry::of(12, 16), DimensionError);
}

TEST(Cdsa, GlobalPhaseEquivarianceWithFrozenOffsets) {
  const PcdWeights w = random_weights(8, 9);
  const FeatureMap f = test::random_tensor({8, 16, 16}, 10);
  const CdsaResult base = cdsa_forward(f, w);
  for (double theta : {0.3, 1.7, 3.0}) {
    const cplx rot = std::polar(1.0, theta);
    FeatureMap fr(f.shape());
    for (std::size_t i = 0; i < f.size(); ++i) fr.set(i, rot * f.get(i));
    const CdsaResult r = cdsa_forward(fr, w, 0, base.offsets);
    EXPECT_LT(max_diff(r.attention, base.attention), 1e-10);
    double err = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) err = std::max(err, std::abs(r.out.get(i) - rot * base.out.get(i)));
    EXPECT_LT(err, 1e-10);
  }
}

TEST(Cdsa, SingleKeyBroadcastsValue) {
  const PcdWeights w = random_weights(4, 11);
  const FeatureMap f = test::random_tensor({4, 8, 8}, 12);
  const CdsaResult r = cdsa_forward(f, w);
  ASSERT_EQ(r.attention.shape(), (Shape{64, 1}));
  for (double a : r.attention.re()) EXPECT_DOUBLE_EQ(a, 1.0);
  Tape t(false);
  const PcdVars p = bind(t, w, false);
  const Tensor v = t.value(ad::conv2d(t, ad::deform_sample(t, t.constant(f), t.constant(r.offsets)),
                                      p.blocks[0].wv, {}));
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_LT(std::abs(r.out.get(c * 64 + i) - v.get(c)), 1e-12);
}

TEST(Cdsa, HermitianSimilarityPeaksAtAlignedPhases) {
  Rng rng(13);
  std::vector<cplx> x(8), y(8);
  for (auto& v : x) v = std::polar(1.0, rng.uniform(0.0, 6.0));
  const auto score = [&](double delta) {
    for (std::size_t j = 0; j < 8; ++j) y[j] = x[j] * std::polar(1.0, delta);
    return hermitian_inner(x, y).real();
  };
  EXPECT_NEAR(score(0.0), 8.0, 1e-12);
  EXPECT_NEAR(score(std::numbers::pi), -8.0, 1e-12);
  for (double d : {0.5, 1.0, 2.0, 3.0}) {
    EXPECT_LT(score(d), score(0.0));
    EXPECT_GT(score(d), score(std::numbers::pi));
  }
}

TEST(Bias, ZeroTableSharedDisplacementAndNodes) {
  const AttentionGeometry g = AttentionGeometry::of(8, 8);
  const Tensor table = test::random_tensor({15, 15}, 14, false);
  Tensor off = Tensor::real({2, 1, 1});
  off.re()[0] = off.re()[1] = 0.5;  // key sits at (4, 4)
  const Tensor b = relative_position_bias(g, off, table);
  EXPECT_EQ(b.shape(), (Shape{64, 1}));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(b.re()[r * 8 + c], table.re()[(r + 3) * 15 + c + 3]);
  const Tensor z = relative_position_bias(g, off, Tensor::real({15, 15}));
  for (double v : z.re()) EXPECT_EQ(v, 0.0);

  // Same displacement, different absolute positions.
  const AttentionGeometry g2 = AttentionGeometry::of(16, 16);
  const Tensor b2 = relative_position_bias(g2, Tensor::real({2, 2, 2}), table);
  // keys 0 and 3 sit at (3.5, 3.5) and (11.5, 11.5); queries (2,2) and (10,10).
  EXPECT_DOUBLE_EQ(b2.re()[(2 * 16 + 2) * 4 + 0], b2.re()[(10 * 16 + 10) * 4 + 3]);
}

TEST(Cffn, ZeroInputAndLinearRegion) {
  PcdWeights w = init_weights(2, 1, 16);
  const FeatureMap z = cffn_forward(FeatureMap({2, 4, 4}), w);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z.get(i), cplx(0.0, 0.0));
  auto& b = w.blocks[0];
  b.ffn_w1.fill_zero();
  b.ffn_w2.fill_zero();
  for (std::size_t c = 0; c < 2; ++c) {
    b.ffn_w1.re()[c * 2 + c] = 2.0;        // {8,2,1,1}: out c <- in c
    b.ffn_w2.re()[c * 8 + c] = 3.0;        // {2,8,1,1}: out c <- hidden c
  }
  FeatureMap f({2, 4, 4});
  for (std::size_t i = 0; i < f.size(); ++i) f.set(i, {0.5 + 0.01 * double(i), 0.0});
  const FeatureMap out = cffn_forward(f, w);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_LT(std::abs(out.get(i) - 6.0 * f.get(i)), 1e-14);
}

TEST(Cffn, SplitRelu) {
  Tape t(false);
  Tensor x({1});
  x.set(0, {-1.0, 2.0});
  EXPECT_EQ(t.value(ad::split_relu(t, t.constant(x))).get(0), cplx(0.0, 2.0));
}

TEST(Cdat, ZeroBranchesAreIdentity) {
  PcdWeights w = random_weights(8, 17);
  auto& b = w.blocks[0];
  b.wv.fill_zero();
  b.ffn_w2.fill_zero();
  b.ffn_b2.fill_zero();
  const FeatureMap f = test::random_tensor({8, 16, 16}, 18);
  const FeatureMap out = cdat_forward(f, w);
  EXPECT_EQ(out.shape(), f.shape());
  EXPECT_LT(max_diff(out, f), 1e-15);
}

TEST(Cdat, ResidualsMatter) {
  const PcdWeights w = random_weights(8, 19);
  const FeatureMap f = test::random_tensor({8, 16, 16}, 20);
  const FeatureMap out = cdat_forward(f, w);
  Tape t(false);
  const PcdVars p = bind(t, w, false);
  const auto& b = p.blocks[0];
  Var a = net::cdsa(t, ad::complex_layer_norm(t, t.constant(f), b.ln1_gamma, b.ln1_beta), b).out;
  Var no_res = net::cffn(t, ad::complex_layer_norm(t, a, b.ln2_gamma, b.ln2_beta), b);
  EXPECT_GT(max_diff(out, t.value(no_res)), 1e-3);
}

TEST(Pirm, ZeroFeaturesGiveResidual) {
  PcdWeights w = random_weights(4, 21);
  w.pirm1_b.fill_zero();
  w.pirm2_b.fill_zero();
  const ComplexField v = test::random_field(32, 32, 22);
  const ComplexField x = pirm_forward(FeatureMap({4, 8, 8}), v, w);
  EXPECT_EQ(x.rows(), 32u);
  EXPECT_EQ(x.cols(), 32u);
  EXPECT_EQ(x.storage(), v.storage());
}

TEST(Pcd, IdentityAtInitAndShape) {
  const PcdWeights w = init_weights(32, 1, 23);
  const ComplexField v = test::random_field(128, 128, 24);
  const ComplexField x = pcd_forward(v, w);
  EXPECT_EQ(x.rows(), 128u);
  EXPECT_EQ(x.storage(), v.storage());
}

TEST(Pcd, ParameterCountIsReported) {
  const PcdWeights w = init_weights(32, 1, 0);
  const std::size_t per_stage = parameter_count(w);
  RecordProperty("pcd_parameters_per_stage", std::to_string(per_stage));
  RecordProperty("pcd_parameters_three_stages", std::to_string(3 * per_stage));
  EXPECT_EQ(per_stage, 66851u);
}

TEST(Pcd, InitIsDeterministicAndFloatExact) {
  const PcdWeights a = init_weights(8, 2, 5), b = init_weights(8, 2, 5);
  std::vector<Tensor> ta, tb;
  a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(t); });
  b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(t); });
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_TRUE(ta[i] == tb[i]);
    for (double v : ta[i].re()) EXPECT_EQ(v, double(float(v)));
  }
  EXPECT_NO_THROW(validate_weights(a));
  for (double v : a.pirm2.re()) EXPECT_EQ(v, 0.0);
}

TEST(Pcd, GlobalReferenceKeepsShape) {
  const PcdWeights w = random_weights(4, 25);
  const FeatureMap f = test::random_tensor({4, 16, 16}, 26);
  EXPECT_EQ(global_attention_reference(f, w).shape(), f.shape());
}

}  // namespace
}  // namespace cgh
