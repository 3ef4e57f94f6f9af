#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "latreg/errors.hpp"
#include "latreg/rng.hpp"
#include "latreg/tensor.hpp"

using namespace latreg;

TEST_CASE("row-major layout matches the documented flat index") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.flat_index({1, 2, 3, 4}) == ((1 * 3 + 2) * 4 + 3) * 5 + 4);
  CHECK(t.size() == 120);
}

TEST_CASE("set then get round trip over random shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const int rank = 1 + static_cast<int>(rng.below(5));
    for (int ax = 0; ax < rank; ++ax) {
      shape.push_back(1 + static_cast<int>(rng.below(5)));
    }
    Tensor t(shape);
    std::vector<double> values(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      values[i] = rng.uniform(-10.0, 10.0);
      t[i] = values[i];
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(t[i] == values[i]);
    }
  }
}

TEST_CASE("invalid shapes are rejected") {
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("elementwise examples") {
  SUBCASE("tanh(0) = 0") {
    Tensor x({1}, {0.0});
    CHECK(elementwise(EwOp::Tanh, x)[0] == 0.0);
  }
  SUBCASE("clip clamps to the interval") {
    Tensor x({3}, {-3.0, 0.5, 7.0});
    Tensor y = clip(x, -1.0, 1.0);
    CHECK(y[0] == -1.0);
    CHECK(y[1] == 0.5);
    CHECK(y[2] == 1.0);
  }
  SUBCASE("exp matches the standard library oracle") {
    Tensor x({2}, {0.0, 1.0});
    Tensor y = elementwise(EwOp::Exp, x);
    CHECK(y[0] == doctest::Approx(std::exp(0.0)).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
  }
  SUBCASE("shape mismatch names both shapes") {
    Tensor a({2, 2});
    Tensor b({3});
    CHECK_THROWS_WITH_AS(elementwise(EwOp::Add, a, b),
                         doctest::Contains("(2, 2)"), ShapeError);
  }
  SUBCASE("division by zero follows IEEE") {
    Tensor a({2}, {1.0, -1.0});
    Tensor b({2}, {0.0, 0.0});
    Tensor y = elementwise(EwOp::Div, a, b);
    CHECK(std::isinf(y[0]));
    CHECK(y[1] < 0);
  }
  SUBCASE("scalar operand broadcasts") {
    Tensor a({3}, {1.0, 2.0, 3.0});
    Tensor y = elementwise(EwOp::Mul, a, 2.0);
    CHECK(y[2] == 6.0);
  }
}

TEST_CASE("reduce examples") {
  SUBCASE("sum over all") {
    Tensor x({3}, {1.0, 2.0, 3.0});
    CHECK(reduce(ReduceOp::Sum, x, {0})[0] == 6.0);
  }
  SUBCASE("mean") {
    Tensor x({2}, {2.0, 4.0});
    CHECK(reduce(ReduceOp::Mean, x, {0})[0] == 3.0);
  }
  SUBCASE("argmax") {
    Tensor x({3}, {0.1, 0.9, 0.3});
    CHECK(reduce(ReduceOp::Argmax, x, {0})[0] == 1.0);
  }
  SUBCASE("empty axis list is an identity copy") {
    Tensor x({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor y = reduce(ReduceOp::Sum, x, {});
    CHECK(y.same_shape(x));
    CHECK(y[3] == 4.0);
  }
  SUBCASE("axis reduction with keep_dims") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = reduce(ReduceOp::Sum, x, {1});
    CHECK(y.shape() == Shape{2});
    CHECK(y[0] == 6.0);
    CHECK(y[1] == 15.0);
    Tensor z = reduce(ReduceOp::Max, x, {0}, true);
    CHECK(z.shape() == Shape{1, 3});
    CHECK(z[2] == 6.0);
  }
  SUBCASE("invalid axis") {
    Tensor x({2});
    CHECK_THROWS_AS(reduce(ReduceOp::Sum, x, {1}), ShapeError);
  }
}

TEST_CASE("reduce-sum equals sequential flat summation") {
  Rng rng(123);
  Tensor x({4, 5, 6});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  double seq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) seq += x[i];
  CHECK(std::fabs(reduce(ReduceOp::Sum, x, {0, 1, 2})[0] - seq) <= 1e-12);
  CHECK(std::fabs(sum_all(x) - seq) <= 1e-12);
}

TEST_CASE("conv3d examples") {
  SUBCASE("1x1x1 identity kernel") {
    Rng rng(5);
    Tensor x({1, 3, 3, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.0, 1.0);
    Tensor k({1, 1, 1, 1, 1}, {1.0});
    Tensor y = conv3d(x, k, 1, 0);
    REQUIRE(y.same_shape(x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("all-ones 3x3x3 kernel over unit input sums the window") {
    Tensor x = Tensor::full({1, 3, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
    Tensor y = conv3d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 27.0);
  }
  SUBCASE("stride-2 shape formula") {
    Tensor x({1, 4, 4, 4});
    Tensor k({2, 1, 3, 3, 3});
    Tensor y = conv3d(x, k, 2, 1);
    CHECK(y.shape() == Shape{2, 2, 2, 2});
  }
  SUBCASE("channel mismatch is a structured error") {
    Tensor x({2, 4, 4, 4});
    Tensor k({1, 3, 3, 3, 3});
    CHECK_THROWS_AS(conv3d(x, k, 1, 1), ShapeError);
  }
}

TEST_CASE("conv3d is linear to 1e-12") {
  Rng rng(99);
  Tensor x({2, 5, 5, 5});
  Tensor y({2, 5, 5, 5});
  Tensor k({3, 2, 3, 3, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = rng.uniform(-1.0, 1.0);
  const double alpha = 0.7, beta = -1.3;
  Tensor mix = elementwise(EwOp::Add, elementwise(EwOp::Mul, x, alpha),
                           elementwise(EwOp::Mul, y, beta));
  Tensor lhs = conv3d(mix, k, 1, 1);
  Tensor rhs = elementwise(EwOp::Add,
                           elementwise(EwOp::Mul, conv3d(x, k, 1, 1), alpha),
                           elementwise(EwOp::Mul, conv3d(y, k, 1, 1), beta));
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    CHECK(std::fabs(lhs[i] - rhs[i]) <= 1e-12);
  }
}

TEST_CASE("upsample_trilinear") {
  SUBCASE("constant input stays constant") {
    Tensor x = Tensor::full({2, 2, 2, 2}, 3.5);
    Tensor y = upsample_trilinear(x, 2);
    CHECK(y.shape() == Shape{2, 4, 4, 4});
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 3.5);
  }
  SUBCASE("factor-2 taps on a degenerate axis follow the coordinate formula") {
    // Source coordinates for dst 0..3 are -0.25, 0.25, 0.75, 1.25; after the
    // border clamp the values are a, 0.75a+0.25b, 0.25a+0.75b, b.
    const double a = 2.0, b = 10.0;
    Tensor x({1, 1, 1, 2}, {a, b});
    Tensor y = upsample_trilinear(x, 2);
    CHECK(y.shape() == Shape{1, 2, 2, 4});
    for (int d = 0; d < 2; ++d) {
      for (int h = 0; h < 2; ++h) {
        CHECK(y.at({0, d, h, 0}) == a);
        CHECK(y.at({0, d, h, 1}) == doctest::Approx(0.75 * a + 0.25 * b).epsilon(1e-15));
        CHECK(y.at({0, d, h, 2}) == doctest::Approx(0.25 * a + 0.75 * b).epsilon(1e-15));
        CHECK(y.at({0, d, h, 3}) == b);
      }
    }
  }
  SUBCASE("factor doubles every spatial extent") {
    Tensor x({3, 2, 2, 2});
    CHECK(upsample_trilinear(x, 2).shape() == Shape{3, 4, 4, 4});
  }
}

TEST_CASE("concat and slice helpers") {
  Tensor a = Tensor::full({1, 2, 2, 2}, 1.0);
  Tensor b = Tensor::full({2, 2, 2, 2}, 2.0);
  Tensor c = concat_channels(a, b);
  CHECK(c.shape() == Shape{3, 2, 2, 2});
  CHECK(c[0] == 1.0);
  CHECK(c[8] == 2.0);
  Tensor bias({3}, {10.0, 20.0, 30.0});
  Tensor d = add_channel_bias(c, bias);
  CHECK(d[0] == 11.0);
  CHECK(d[16] == 32.0);
}

TEST_CASE("axis_forward_diff") {
  Tensor x({1, 1, 1, 4}, {0.0, 1.0, 3.0, 6.0});
  Tensor d = axis_forward_diff(x, 3);
  CHECK(d.shape() == Shape{1, 1, 1, 3});
  CHECK(d[0] == 1.0);
  CHECK(d[1] == 2.0);
  CHECK(d[2] == 3.0);
  CHECK_THROWS_AS(axis_forward_diff(x, 1), ShapeError);  // extent 1
}
