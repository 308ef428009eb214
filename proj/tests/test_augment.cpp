#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "stnyolo/augment.hpp"
#include "stnyolo/errors.hpp"

using namespace stnyolo;

namespace {

Tensor smooth_image(int h, int w) {
  std::vector<Real> v(static_cast<std::size_t>(3 * h * w));
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        v[(c * h + i) * w + j] = 0.5 + 0.3 * std::sin(0.08 * j + 1.1 * c) * std::cos(0.06 * i + 0.4 * c);
  return Tensor::from({1, 3, h, w}, std::move(v));
}

// Kolmogorov-Smirnov distance of a sample against U[lo, hi].
Real ks_uniform(std::vector<Real> xs, Real lo, Real hi) {
  std::sort(xs.begin(), xs.end());
  Real d = 0.0;
  const Real n = static_cast<Real>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Real f = (xs[i] - lo) / (hi - lo);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

}  // namespace

TEST(Warp, AllOffIsExact) {
  Tensor x = smooth_image(20, 24);
  Tensor y = affine_image(x, 0, 0, 0, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.data()[i], x.data()[i]);
}

TEST(Warp, QuarterTurnMovesHotPixel) {
  // top-left -> bottom-left for a visually counter-clockwise quarter turn
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 0});
  Tensor y = affine_image(x, 90, 0, 0, 1);
  EXPECT_EQ(std::vector<Real>(y.data().begin(), y.data().end()), (std::vector<Real>{0, 0, 1, 0}));
}

TEST(Warp, RotateThereAndBack) {
  const int n = 64;
  Tensor x = smooth_image(n, n);
  Tensor y = affine_image(affine_image(x, 10, 0, 0, 1), -10, 0, 0, 1);
  Real worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int i = n / 4; i < 3 * n / 4; ++i)
      for (int j = n / 4; j < 3 * n / 4; ++j) {
        const std::size_t o = (static_cast<std::size_t>(c) * n + i) * n + j;
        worst = std::max(worst, std::abs(y.data()[o] - x.data()[o]));
      }
  EXPECT_LE(worst, 0.02);
}

TEST(Frames, SamplerThetaRoundTrip) {
  const Affine2x3 m = content_affine(7, 3, -4, 1.1);
  const Affine2x3 t = sampler_theta(m, 40, 30);
  const Affine2x3 back = theta_to_pixel(t, 40, 30);
  const Affine2x3 inv = invert_affine(m);
  for (int k = 0; k < 6; ++k) EXPECT_NEAR(back[k], inv[k], 1e-12);
}

TEST(Boxes, IdentityUnchanged) {
  std::vector<BBox> b{{0, 0.3, 0.4, 0.2, 0.1}, {1, 0.7, 0.6, 0.3, 0.5}};
  auto out = transform_boxes(b, kIdentityAffine, 64, 48);
  ASSERT_EQ(out.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(out[i].cx, b[i].cx, 1e-15);
    EXPECT_NEAR(out[i].cy, b[i].cy, 1e-15);
    EXPECT_NEAR(out[i].w, b[i].w, 1e-15);
    EXPECT_NEAR(out[i].h, b[i].h, 1e-15);
    EXPECT_EQ(out[i].class_id, b[i].class_id);
  }
}

TEST(Boxes, QuarterTurnSwapsExtent) {
  auto out = transform_boxes({{0, 0.5, 0.5, 0.2, 0.4}}, content_affine(90, 0, 0, 1), 100, 100);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0].cx, 0.5, 1e-12);
  EXPECT_NEAR(out[0].cy, 0.5, 1e-12);
  EXPECT_NEAR(out[0].w, 0.4, 1e-12);
  EXPECT_NEAR(out[0].h, 0.2, 1e-12);
}

TEST(Boxes, DensePointOracle) {
  const int w = 120, h = 90;
  for (Real deg : {10.0, -10.0, 7.5}) {
    const Affine2x3 m = content_affine(deg, deg / 3, 0, 1.0);
    for (BBox b : {BBox{0, 0.12, 0.15, 0.2, 0.25}, BBox{0, 0.9, 0.85, 0.18, 0.2}, BBox{0, 0.5, 0.5, 0.3, 0.1}}) {
      Real x1 = 1e9, y1 = 1e9, x2 = -1e9, y2 = -1e9;
      const int steps = 2000;
      for (int s = 0; s <= steps; ++s) {
        const Real t = static_cast<Real>(s) / steps;
        for (auto [u, v] : {std::pair{t, 0.0}, {t, 1.0}, {0.0, t}, {1.0, t}}) {
          const Real px = (b.x1() + u * b.w) * w - w / 2.0, py = (b.y1() + v * b.h) * h - h / 2.0;
          const auto [qx, qy] = apply_affine(m, px, py);
          x1 = std::min(x1, (qx + w / 2.0) / w);
          x2 = std::max(x2, (qx + w / 2.0) / w);
          y1 = std::min(y1, (qy + h / 2.0) / h);
          y2 = std::max(y2, (qy + h / 2.0) / h);
        }
      }
      x1 = std::clamp(x1, 0.0, 1.0);
      x2 = std::clamp(x2, 0.0, 1.0);
      y1 = std::clamp(y1, 0.0, 1.0);
      y2 = std::clamp(y2, 0.0, 1.0);
      auto out = transform_boxes({b}, m, w, h, 0.0);
      ASSERT_EQ(out.size(), 1u);
      EXPECT_NEAR(out[0].x1(), x1, 1e-6);
      EXPECT_NEAR(out[0].x2(), x2, 1e-6);
      EXPECT_NEAR(out[0].y1(), y1, 1e-6);
      EXPECT_NEAR(out[0].y2(), y2, 1e-6);
    }
  }
}

TEST(Boxes, MostlyOutsideIsDropped) {
  // a zoom pushes the corner box almost entirely off the canvas
  auto out = transform_boxes({{0, 0.05, 0.05, 0.1, 0.1}}, content_affine(0, 0, 0, 1.8), 100, 100, 0.10);
  EXPECT_TRUE(out.empty());
  EXPECT_THROW(transform_boxes({{0, 0.5, 0.5, 0.1, 0.1}}, Affine2x3{1, 1, 0, 1, 1, 0}, 10, 10), ValueError);
}

TEST(Testset, AllOffIsBitwiseCopy) {
  Dataset ds = synth_dataset(3, 4, 64);
  Dataset out = augment_testset(ds, AugmentSpec{});
  ASSERT_EQ(out.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(out.samples[i].boxes, ds.samples[i].boxes);
    for (std::size_t k = 0; k < ds.samples[i].image.numel(); ++k)
      ASSERT_EQ(out.samples[i].image.data()[k], ds.samples[i].image.data()[k]);
  }
}

TEST(Testset, SameSeedSameResult) {
  Dataset ds = synth_dataset(4, 5, 64);
  AugmentSpec spec;
  spec.rotation = spec.shear = spec.crop = true;
  spec.seed = 11;
  Dataset a = augment_testset(ds, spec), b = augment_testset(ds, spec);
  spec.seed = 12;
  Dataset c = augment_testset(ds, spec);
  bool differs = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(a.samples[i].boxes, b.samples[i].boxes);
    for (std::size_t k = 0; k < a.samples[i].image.numel(); ++k) {
      ASSERT_EQ(a.samples[i].image.data()[k], b.samples[i].image.data()[k]);
      differs |= a.samples[i].image.data()[k] != c.samples[i].image.data()[k];
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Draws, WithinRangeAndUniform) {
  AugmentSpec spec;
  spec.rotation = spec.shear = spec.crop = true;
  spec.seed = 5;
  std::vector<Real> rot, sh, sv, zoom;
  for (std::size_t i = 0; i < 1000; ++i) {
    AugmentDraw d = draw_augment(spec, i);
    rot.push_back(d.rotation_deg);
    sh.push_back(d.shear_h_deg);
    sv.push_back(d.shear_v_deg);
    zoom.push_back(d.zoom);
  }
  auto in = [](const std::vector<Real>& v, Real lo, Real hi) {
    return std::all_of(v.begin(), v.end(), [&](Real x) { return x >= lo && x <= hi; });
  };
  EXPECT_TRUE(in(rot, -10, 10));
  EXPECT_TRUE(in(sh, -10, 10));
  EXPECT_TRUE(in(sv, -10, 10));
  EXPECT_TRUE(in(zoom, 1.0, 1.15));
  const Real crit = 1.63 / std::sqrt(1000.0);  // 1% level
  EXPECT_LT(ks_uniform(rot, -10, 10), crit);
  EXPECT_LT(ks_uniform(sh, -10, 10), crit);
  EXPECT_LT(ks_uniform(sv, -10, 10), crit);
  EXPECT_LT(ks_uniform(zoom, 1.0, 1.15), crit);
}

TEST(Draws, RowsShareComponents) {
  AugmentSpec r, rs;
  r.rotation = true;
  rs.rotation = rs.shear = true;
  r.seed = rs.seed = 3;
  for (std::size_t i = 0; i < 50; ++i) {
    AugmentDraw a = draw_augment(r, i), b = draw_augment(rs, i);
    EXPECT_EQ(a.rotation_deg, b.rotation_deg);
    EXPECT_EQ(a.shear_h_deg, 0.0);
    EXPECT_EQ(a.zoom, 1.0);
  }
}

TEST(Grid, EightCombinationsInTableOrder) {
  auto grid = augment_grid(AugmentSpec{});
  std::vector<std::string> labels;
  for (const auto& g : grid) labels.push_back(g.label());
  EXPECT_EQ(labels, (std::vector<std::string>{"none", "C", "S", "S+C", "R", "R+C", "R+S", "R+S+C"}));
}

TEST(Spec, ParseJsonAndValidate) {
  AugmentSpec a = parse_augment_list("rotation,crop");
  EXPECT_TRUE(a.rotation && a.crop && !a.shear);
  EXPECT_EQ(parse_augment_list("R+S").label(), "R+S");
  EXPECT_FALSE(parse_augment_list("none").any());
  EXPECT_THROW(parse_augment_list("flip"), ValueError);
  a.seed = 99;
  a.rotation_deg = 12.5;
  EXPECT_EQ(augment_from_json(augment_to_json(a)), a);
  auto j = augment_to_json(a);
  j["bogus"] = 1;
  EXPECT_THROW(augment_from_json(j), ValueError);
  AugmentSpec bad;
  bad.shear_deg = 80;
  EXPECT_THROW(bad.validate(), ValueError);
}
