#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cgh/fft.hpp"
#include "cgh/tensor.hpp"
#include "test_util.hpp"

namespace cgh {
namespace {

TEST(Fft, DeltaGivesFlatSpectrum) {
  ComplexField f(8, 16, 1.0);
  f(0, 0) = 1.0;
  const ComplexField s = fft2(f);
  for (const auto& v : s) EXPECT_NEAR(std::abs(v), 1.0 / std::sqrt(128.0), 1e-15);
}

TEST(Fft, RoundTripAndParseval) {
  for (std::size_t n : {64, 512}) {
    const ComplexField x = test::random_field(n, n, n);
    const ComplexField s = fft2(x);
    EXPECT_LT(test::max_abs_diff(ifft2(s), x), 1e-12);
    EXPECT_LT(std::abs(test::norm(s) - test::norm(x)) / test::norm(x), 1e-12);
  }
}

TEST(Fft, RejectsNonFinite) {
  ComplexField x(4, 4, 1.0);
  x(1, 2) = {std::nan(""), 0.0};
  EXPECT_THROW(fft2(x), NumericError);
}

TEST(Hermitian, HandExample) {
  const std::vector<cplx> x{{1, 0}, {0, 1}}, y{{0, 1}, {1, 0}};
  const cplx v = hermitian_inner(x, y);
  EXPECT_EQ(v, cplx(0.0, 0.0));
}

TEST(Hermitian, SelfProductAndConjugateSymmetry) {
  const ComplexField x = test::random_field(1, 200, 1), y = test::random_field(1, 200, 2);
  const cplx xx = test::inner(x, x);
  EXPECT_NEAR(xx.real(), test::norm(x) * test::norm(x), 1e-10);
  EXPECT_LT(std::abs(xx.imag()), 1e-14 * xx.real());
  EXPECT_LT(std::abs(std::conj(test::inner(x, y)) - test::inner(y, x)), 1e-12);
}

TEST(Hermitian, RotationInvarianceVersusPlainDot) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    ComplexField x = test::random_field(1, 32, 100 + trial), y = test::random_field(1, 32, 500 + trial);
    const double theta = rng.uniform(0.1, std::numbers::pi - 0.1);
    const cplx before = test::inner(x, y);
    cplx dot_before{}, dot_after{};
    for (std::size_t j = 0; j < x.size(); ++j) dot_before += x[j] * y[j];
    const cplx r = std::polar(1.0, theta);
    for (auto& v : x) v *= r;
    for (auto& v : y) v *= r;
    for (std::size_t j = 0; j < x.size(); ++j) dot_after += x[j] * y[j];
    EXPECT_LT(std::abs(test::inner(x, y) - before), 1e-12 * std::max(1.0, std::abs(before)));
    EXPECT_GT(std::abs(dot_after - dot_before), 1e-6);
  }
}

TEST(Hermitian, LengthMismatch) {
  const std::vector<cplx> a(3), b(4);
  EXPECT_THROW(hermitian_inner(a, b), DimensionError);
}

TEST(LayerNorm, ConstantMapNormalisesToZero) {
  FeatureMap f({4, 3, 3});
  for (std::size_t i = 0; i < f.size(); ++i) f.set(i, {3.0, 4.0});
  const FeatureMap out = complex_layer_norm(f, ComplexAffine::identity(4));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.get(i), cplx(0.0, 0.0));
}

TEST(LayerNorm, SingleChannelIsZero) {
  FeatureMap f({1, 2, 2});
  for (std::size_t i = 0; i < f.size(); ++i) f.set(i, {3.0, 4.0});
  const FeatureMap out = complex_layer_norm(f, ComplexAffine::identity(1));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.get(i), cplx(0.0, 0.0));
}

TEST(LayerNorm, UnitJointVariance) {
  const FeatureMap f = test::random_tensor({16, 5, 5}, 9);
  const FeatureMap out = complex_layer_norm(f, ComplexAffine::identity(16), 0.0);
  const std::size_t C = 16, HW = 25;
  for (std::size_t p = 0; p < HW; ++p) {
    cplx mean{};
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += out.get(c * HW + p);
    mean /= double(C);
    for (std::size_t c = 0; c < C; ++c) var += std::norm(out.get(c * HW + p) - mean);
    EXPECT_LT(std::abs(mean), 1e-12);
    EXPECT_NEAR(var / double(C), 1.0, 1e-6);
  }
}

TEST(Bilinear, NodesMidpointsAndClamping) {
  const FeatureMap f = test::random_tensor({3, 5, 6}, 4);
  SampleGrid g{{{2.0, 3.0}, {-3.2, 1.0}, {0.0, 1.0}, {2.5, 3.0}, {2.0, 3.25}}};
  const auto s = bilinear_sample(f, g);
  ASSERT_EQ(s.size(), 5u);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto at = [&](std::size_t r, std::size_t col) { return f.get(c * 30 + r * 6 + col); };
    EXPECT_EQ(s[0][c], at(2, 3));
    EXPECT_EQ(s[1][c], s[2][c]);
    EXPECT_LT(std::abs(s[3][c] - 0.5 * (at(2, 3) + at(3, 3))), 1e-15);
    EXPECT_LT(std::abs(s[4][c] - (0.75 * at(2, 3) + 0.25 * at(2, 4))), 1e-15);
  }
}

TEST(Bilinear, TwoByOneMidpoint) {
  FeatureMap f({1, 2, 1});
  f.set(0, {1.0, -2.0});
  f.set(1, {3.0, 6.0});
  const auto s = bilinear_sample(f, SampleGrid{{{0.5, 0.0}}});
  EXPECT_EQ(s[0][0], cplx(2.0, 2.0));
  EXPECT_TRUE(bilinear_sample(f, SampleGrid{}).empty());
}

TEST(Grid, RejectsBadPitch) {
  EXPECT_THROW(ComplexField(2, 2, 0.0), ConfigError);
  EXPECT_THROW(ComplexField(0, 2, 1.0), ConfigError);
}

}  // namespace
}  // namespace cgh
