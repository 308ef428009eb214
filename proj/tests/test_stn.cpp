#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "stnyolo/augment.hpp"
#include "stnyolo/errors.hpp"
#include "stnyolo/stn.hpp"

using namespace stnyolo;
using stnyolo::testing::grad_rel_error;
using stnyolo::testing::random_tensor;
using stnyolo::testing::weighted_sum;

namespace {

LocalizationConfig small_loc() {
  LocalizationConfig c;
  c.conv_channels = 2;
  c.kernel = 3;
  c.pool_size = 2;
  return c;
}

// Smooth unit-range test image.
Tensor smooth_image(int h, int w) {
  std::vector<Real> v(static_cast<std::size_t>(3 * h * w));
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        v[(c * h + i) * w + j] = 0.5 + 0.25 * std::sin(0.11 * j + 0.7 * c) * std::cos(0.09 * i - 0.3 * c);
  return Tensor::from({1, 3, h, w}, std::move(v));
}

}  // namespace

TEST(Localization, FreshNetIsIdentity) {
  std::mt19937_64 rng(1);
  LocalizationNet net(LocalizationConfig{}, rng);
  Tensor x = random_tensor({4, 3, 64, 64}, rng, 0, 1, false);
  AffineParams theta = net.forward(x);
  EXPECT_EQ(theta.theta.shape(), (Shape{4, 6}));
  for (int n = 0; n < 4; ++n) EXPECT_EQ(theta.item(n), kIdentityAffine);
}

TEST(Localization, ThetaGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    LocalizationNet net(small_loc(), rng);
    for (Real& v : net.fc_weight.mutable_data()) v = std::uniform_real_distribution<Real>(-0.5, 0.5)(rng);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1, false);
    auto f = [&] { return ops::sum(net.forward(x).theta); };
    EXPECT_LT(grad_rel_error(f, {net.conv_weight, net.conv_bias, net.fc_weight}), 1e-4) << trial;
  }
}

TEST(Grid, IdentityReproducesLattice) {
  SamplingGrid g = generate_grid(AffineParams::identity(1), 5, 7);
  auto d = g.coords.data();
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) {
      EXPECT_EQ(d[(i * 7 + j) * 2], g.target_x(j));
      EXPECT_EQ(d[(i * 7 + j) * 2 + 1], g.target_y(i));
    }
  EXPECT_EQ(g.target_x(0), -1.0);
  EXPECT_EQ(g.target_x(6), 1.0);
}

TEST(Grid, TranslationAndScale) {
  SamplingGrid shift = generate_grid(AffineParams::constant({{1, 0, 0.5, 0, 1, 0}}), 4, 4);
  SamplingGrid twice = generate_grid(AffineParams::constant({{2, 0, 0, 0, 1, 0}}), 4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const std::size_t o = (i * 4 + j) * 2;
      EXPECT_EQ(shift.coords.data()[o], shift.target_x(j) + 0.5);
      EXPECT_EQ(shift.coords.data()[o + 1], shift.target_y(i));
      EXPECT_EQ(twice.coords.data()[o], 2.0 * twice.target_x(j));
    }
  EXPECT_EQ(twice.coords.data()[6], 2.0);
}

TEST(Grid, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor theta = random_tensor({2, 6}, rng);
    Tensor probe = random_tensor({2, 3, 4, 2}, rng, -1, 1, false);
    auto f = [&] { return weighted_sum(generate_grid(AffineParams{theta}, 3, 4).coords, probe); };
    EXPECT_LT(grad_rel_error(f, {theta}), 1e-4);
  }
}

TEST(Grid, BadThetaShapeThrows) {
  EXPECT_THROW(generate_grid(AffineParams{Tensor::zeros({1, 4})}, 2, 2), ShapeError);
}

TEST(Sampler, IdentityIsBitExact) {
  std::mt19937_64 rng(4);
  for (int h : {1, 2, 5, 17, 64}) {
    Tensor x = random_tensor({2, 3, h, h + 3}, rng, 0, 1, false);
    Tensor y = sample(x, generate_grid(AffineParams::identity(2), h, h + 3));
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(Sampler, FarOutsideIsZero) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({1, 2, 6, 6}, rng, 0, 1, false);
  Tensor y = sample(x, generate_grid(AffineParams::constant({{0, 0, -5, 0, 0, -5}}), 6, 6));
  for (Real v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sampler, HalfPixelShiftOnRamp) {
  const int w = 9;
  std::vector<Real> v(w * 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < w; ++j) v[i * w + j] = j;
  Tensor x = Tensor::from({1, 1, 3, w}, v);
  const Real half = 1.0 / (w - 1);  // half a pixel in normalized units
  Tensor y = sample(x, generate_grid(AffineParams::constant({{1, 0, half, 0, 1, 0}}), 3, w));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j + 1 < w; ++j) EXPECT_NEAR(y.data()[i * w + j], 0.5 * (j + (j + 1)), 1e-12);
}

TEST(Sampler, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({2, 2, 5, 6}, rng);
    Tensor coords = random_tensor({2, 4, 3, 2}, rng, -1.2, 1.2);
    SamplingGrid g{coords, 4, 3};
    Tensor probe = random_tensor({2, 2, 4, 3}, rng, -1, 1, false);
    EXPECT_LT(grad_rel_error([&] { return weighted_sum(sample(x, g), probe); }, {x, coords}), 1e-4) << trial;
  }
}

TEST(Stn, FreshForwardEqualsInput) {
  std::mt19937_64 rng(7);
  LocalizationNet net(LocalizationConfig{}, rng);
  Tensor x = random_tensor({2, 3, 64, 64}, rng, 0, 1, false);
  Tensor y = stn_forward(net, x);
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.data()[i], x.data()[i]);
}

TEST(Stn, FrozenInverseRotationRestoresCentre) {
  std::mt19937_64 rng(8);
  const int n = 64;
  Tensor x = smooth_image(n, n);
  const Affine2x3 m = content_affine(10.0, 0, 0, 1.0);
  Tensor rotated = warp_image(x, m);
  LocalizationNet net(LocalizationConfig{}, rng);
  net.freeze_to(sampler_theta(invert_affine(m), n, n));
  Tensor y = stn_forward(net, rotated);
  Real worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int i = n / 4; i < 3 * n / 4; ++i)
      for (int j = n / 4; j < 3 * n / 4; ++j) {
        const std::size_t o = (static_cast<std::size_t>(c) * n + i) * n + j;
        worst = std::max(worst, std::abs(y.data()[o] - x.data()[o]));
      }
  EXPECT_LE(worst, 0.02);
  EXPECT_FALSE(net.conv_weight.requires_grad());
}

TEST(Stn, GradientThroughSamplerToConvWeights) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    LocalizationNet net(small_loc(), rng);
    for (Real& v : net.fc_weight.mutable_data()) v = std::uniform_real_distribution<Real>(-0.2, 0.2)(rng);
    // off-lattice bias: with dead ReLUs an exact identity would sit on the bilinear kinks
    for (Real& v : net.fc_bias.mutable_data()) v += std::uniform_real_distribution<Real>(-0.1, 0.1)(rng);
    Tensor x = random_tensor({1, 3, 7, 7}, rng, 0, 1, false);
    auto f = [&] { return ops::sum(stn_forward(net, x)); };
    EXPECT_LT(grad_rel_error(f, {net.conv_weight, net.fc_weight, net.fc_bias}), 1e-4) << trial;
  }
}
