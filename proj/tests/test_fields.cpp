#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "latreg/errors.hpp"
#include "latreg/fields.hpp"
#include "latreg/oracles.hpp"
#include "latreg/rng.hpp"

using namespace latreg;

namespace {

Tensor random_volume(int n, Rng& rng) {
  Tensor v({n, n, n});
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform(0.0, 1.0);
  return v;
}

// Unit-range volume with low spatial frequency, so trilinear resampling
// error stays well under the composition tolerance.
Tensor smooth_volume(int n, Rng& rng) {
  Tensor v({n, n, n});
  const double kx = rng.uniform(0.15, 0.35), ky = rng.uniform(0.15, 0.35),
               kz = rng.uniform(0.15, 0.35);
  const double phase = rng.uniform(0.0, 6.28);
  for (int d = 0; d < n; ++d) {
    for (int h = 0; h < n; ++h) {
      for (int w = 0; w < n; ++w) {
        v.at({d, h, w}) = 0.5 + 0.45 * std::sin(kz * d + ky * h + kx * w + phase);
      }
    }
  }
  return v;
}

// Smooth small field vanishing at every border: half-period sine bumps with
// gentle curvature, the regime the 0.05 composition tolerance is calibrated
// for. Larger or rougher fields make plain interpolation error dominate.
DisplacementField smooth_field(int n, double amplitude, Rng& rng) {
  Tensor u({3, n, n, n});
  const double pi = std::numbers::pi;
  for (int c = 0; c < 3; ++c) {
    const double scale =
        amplitude * rng.uniform(0.5, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    const double fd = rng.uniform(1.0, 1.2), fh = rng.uniform(1.0, 1.2),
                 fw = rng.uniform(1.0, 1.2);
    for (int d = 0; d < n; ++d) {
      for (int h = 0; h < n; ++h) {
        for (int w = 0; w < n; ++w) {
          u.at({c, d, h, w}) = scale * std::sin(fd * pi * d / (n - 1.0)) *
                               std::sin(fh * pi * h / (n - 1.0)) *
                               std::sin(fw * pi * w / (n - 1.0));
        }
      }
    }
  }
  return DisplacementField(std::move(u));
}

}  // namespace

TEST_CASE("zero field is the identity for both warp modes") {
  Rng rng(3);
  Tensor vol = random_volume(5, rng);
  DisplacementField zero = DisplacementField::zeros(5, 5, 5);
  Tensor tri = warp_volume(vol, zero, WarpMode::Trilinear);
  Tensor near = warp_volume(vol, zero, WarpMode::Nearest);
  for (std::size_t i = 0; i < vol.size(); ++i) {
    CHECK(tri[i] == vol[i]);
    CHECK(near[i] == vol[i]);
  }
}

TEST_CASE("constant unit shift moves a bright voxel and clamps the border") {
  const int n = 6;
  Tensor vol({n, n, n});
  vol.at({3, 3, 4}) = 1.0;
  Tensor u({3, n, n, n});
  for (int i = 0; i < n * n * n; ++i) u[2 * n * n * n + i] = 1.0;  // shift +w
  DisplacementField field(std::move(u));

  Tensor out = warp_volume(vol, field, WarpMode::Trilinear);
  // output(x) samples vol(x + u), so the bright voxel lands one voxel lower
  CHECK(out.at({3, 3, 3}) == 1.0);
  CHECK(out.at({3, 3, 4}) == 0.0);

  // border clamp: the last column samples itself
  Tensor edge({n, n, n});
  for (int d = 0; d < n; ++d)
    for (int h = 0; h < n; ++h) edge.at({d, h, n - 1}) = 2.0;
  Tensor out2 = warp_volume(edge, field, WarpMode::Trilinear);
  CHECK(out2.at({0, 0, n - 1}) == 2.0);
}

TEST_CASE("half-voxel shift interpolates the midpoint") {
  Tensor vol({1, 1, 2}, {4.0, 8.0});
  Tensor u({3, 1, 1, 2});
  u.at({2, 0, 0, 0}) = 0.5;
  DisplacementField field(std::move(u));
  Tensor out = warp_volume(vol, field, WarpMode::Trilinear);
  CHECK(out.at({0, 0, 0}) == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("warp rejects mismatched shapes") {
  Tensor vol({4, 4, 4});
  DisplacementField field = DisplacementField::zeros(5, 4, 4);
  CHECK_THROWS_AS(warp_volume(vol, field, WarpMode::Trilinear), ShapeError);
}

TEST_CASE("compose identity laws are exact") {
  Rng rng(17);
  DisplacementField u = smooth_field(6, 0.8, rng);
  DisplacementField zero = DisplacementField::zeros(6, 6, 6);
  DisplacementField left = compose(zero, u);
  DisplacementField right = compose(u, zero);
  for (std::size_t i = 0; i < u.tensor().size(); ++i) {
    CHECK(left.tensor()[i] == u.tensor()[i]);
    CHECK(right.tensor()[i] == u.tensor()[i]);
  }
}

TEST_CASE("two constant unit shifts compose to a double shift") {
  const int n = 6;
  auto unit_w = [&]() {
    Tensor u({3, n, n, n});
    for (int i = 0; i < n * n * n; ++i) u[2 * n * n * n + i] = 1.0;
    return DisplacementField(std::move(u));
  };
  DisplacementField total = compose(unit_w(), unit_w());
  for (int d = 0; d < n; ++d) {
    for (int h = 0; h < n; ++h) {
      for (int w = 0; w < n; ++w) {
        CHECK(total.component(0, d, h, w) == 0.0);
        CHECK(total.component(1, d, h, w) == 0.0);
        CHECK(total.component(2, d, h, w) == 2.0);
      }
    }
  }
}

TEST_CASE("double warp agrees with the composed warp on smooth fields") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor vol = smooth_volume(8, rng);
    DisplacementField u1 = smooth_field(8, 0.3, rng);
    DisplacementField u2 = smooth_field(8, 0.3, rng);
    Tensor direct = warp_volume(warp_volume(vol, u1, WarpMode::Trilinear), u2,
                                WarpMode::Trilinear);
    Tensor via_compose = warp_volume(vol, compose(u1, u2), WarpMode::Trilinear);
    double worst = 0.0;
    for (std::size_t i = 0; i < direct.size(); ++i) {
      worst = std::max(worst, std::fabs(direct[i] - via_compose[i]));
    }
    CHECK(worst <= 0.05);
  }
}

TEST_CASE("compose is associative up to interpolation error") {
  Rng rng(29);
  DisplacementField a = smooth_field(8, 0.3, rng);
  DisplacementField b = smooth_field(8, 0.3, rng);
  DisplacementField c = smooth_field(8, 0.3, rng);
  DisplacementField left = compose(a, compose(b, c));
  DisplacementField right = compose(compose(a, b), c);
  double worst = 0.0;
  for (std::size_t i = 0; i < left.tensor().size(); ++i) {
    worst = std::max(worst, std::fabs(left.tensor()[i] - right.tensor()[i]));
  }
  CHECK(worst <= 0.05);
}

TEST_CASE("jacobian determinant of the identity is one everywhere") {
  DisplacementField zero = DisplacementField::zeros(5, 5, 5);
  Tensor det = jacobian_determinant(zero);
  for (std::size_t i = 0; i < det.size(); ++i) CHECK(det[i] == 1.0);
  CHECK(njd_percent(zero) == 0.0);
}

TEST_CASE("uniform scaling field has the affine determinant") {
  const int n = 8;
  Tensor u({3, n, n, n});
  const double center = (n - 1) / 2.0;
  for (int d = 0; d < n; ++d) {
    for (int h = 0; h < n; ++h) {
      for (int w = 0; w < n; ++w) {
        u.at({0, d, h, w}) = 0.1 * (d - center);
        u.at({1, d, h, w}) = 0.1 * (h - center);
        u.at({2, d, h, w}) = 0.1 * (w - center);
      }
    }
  }
  Tensor det = jacobian_determinant(DisplacementField(std::move(u)));
  for (std::size_t i = 0; i < det.size(); ++i) {
    CHECK(det[i] == doctest::Approx(1.331).epsilon(1e-12));
  }
}

TEST_CASE("folding ramp flips the determinant sign on half the voxels") {
  const int n = 8;
  Tensor u({3, n, n, n});
  // u_w = -2w while the ramp lasts, then constant: the forward difference is
  // -2 at w = 0..3 and 0 afterwards, so exactly half the voxels fold.
  for (int d = 0; d < n; ++d) {
    for (int h = 0; h < n; ++h) {
      for (int w = 0; w < n; ++w) {
        u.at({2, d, h, w}) = -2.0 * std::min(w, 4);
      }
    }
  }
  DisplacementField field(std::move(u));
  Tensor det = jacobian_determinant(field);
  CHECK(det.at({0, 0, 0}) == -1.0);
  CHECK(njd_percent(field) == 50.0);
  CHECK(oracle::brute_njd_percent(field) == 50.0);
}

TEST_CASE("small smooth fields cannot fold") {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    DisplacementField u = smooth_field(8, 0.3, rng);
    CHECK(njd_percent(u) == 0.0);
    CHECK(oracle::brute_njd_percent(u) == 0.0);
  }
}

TEST_CASE("njd matches the brute-force count on random fields") {
  Rng rng(37);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor u({3, 6, 6, 6});
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = rng.uniform(-1.5, 1.5);
    DisplacementField field(std::move(u));
    CHECK(njd_percent(field) == oracle::brute_njd_percent(field));
    CHECK(njd_percent(field) >= 0.0);
    CHECK(njd_percent(field) <= 100.0);
  }
}

TEST_CASE("jacobian needs extents of at least two") {
  CHECK_THROWS_AS(jacobian_determinant(DisplacementField::zeros(1, 4, 4)),
                  ShapeError);
}

TEST_CASE("nearest label warping uses rounded displaced coordinates") {
  LabelMap labels(4, 4, 4, 2);
  labels.set(1, 1, 2, 1);
  labels.set(2, 2, 2, 2);
  Tensor u({3, 4, 4, 4});
  for (int i = 0; i < 64; ++i) u[2 * 64 + i] = 0.9;  // +0.9 along w, rounds to 1
  LabelMap warped = warp_labels(labels, DisplacementField(std::move(u)));
  CHECK(warped.at(1, 1, 1) == 1);
  CHECK(warped.at(2, 2, 1) == 2);
  CHECK(warped.at(1, 1, 2) == 0);
}
