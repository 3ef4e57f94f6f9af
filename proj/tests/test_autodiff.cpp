#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "latreg/autodiff.hpp"
#include "latreg/errors.hpp"
#include "latreg/oracles.hpp"
#include "latreg/rng.hpp"
#include "latreg/tensor.hpp"

using namespace latreg;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// FD-checks the gradient of a scalar-valued graph w.r.t. one leaf.
void check_gradient(const std::function<ad::Var(ad::Tape&, ad::Var)>& build,
                    const Tensor& x, double bound = 1e-4, double step = 1e-5) {
  ad::Tape tape;
  ad::Var leaf = tape.leaf("x", x);
  ad::Var loss = build(tape, leaf);
  ad::GradientMap grads = tape.backward(loss);
  const Tensor& analytic = grads.at("x");

  auto f = [&](const Tensor& probe) {
    ad::Tape t2;
    ad::Var l = t2.leaf("x", probe);
    return build(t2, l).value().item();
  };
  Tensor fd = oracle::fd_gradient(f, x, step);
  CHECK(oracle::max_rel_error(analytic, fd) <= bound);
}

}  // namespace

TEST_CASE("linear loss has the data as gradient") {
  Rng rng(11);
  Tensor w = random_tensor({4}, rng);
  Tensor x = random_tensor({4}, rng);
  ad::Tape tape;
  ad::Var wv = tape.leaf("w", w);
  ad::Var xv = tape.constant(x);
  ad::GradientMap grads = tape.backward(tape.sum(tape.mul(wv, xv)));
  const Tensor& g = grads.at("w");
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(g[i] == x[i]);
}

TEST_CASE("tanh gradient at zero is one") {
  ad::Tape tape;
  ad::Var w = tape.leaf("w", Tensor({1}, {0.0}));
  ad::GradientMap grads = tape.backward(tape.sum(tape.tanh(w)));
  CHECK(grads.at("w")[0] == 1.0);
}

TEST_CASE("non-scalar loss is rejected") {
  ad::Tape tape;
  ad::Var w = tape.leaf("w", Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(w), ShapeError);
}

TEST_CASE("detach blocks gradient flow") {
  SUBCASE("loss through detach only is zero") {
    ad::Tape tape;
    ad::Var x = tape.leaf("x", Tensor({3}, {1.0, 2.0, 3.0}));
    ad::GradientMap grads = tape.backward(tape.sum(tape.detach(x)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at("x")[i] == 0.0);
  }
  SUBCASE("product with a detached branch severs one factor") {
    Tensor xv({2}, {3.0, -2.0});
    ad::Tape tape;
    ad::Var x = tape.leaf("x", xv);
    ad::Var prod = tape.mul(tape.detach(x), x);
    ad::GradientMap grads = tape.backward(tape.sum(prod));
    // d/dx of detach(x) * x is the detached value alone.
    CHECK(grads.at("x")[0] == 3.0);
    CHECK(grads.at("x")[1] == -2.0);
  }
}

TEST_CASE("clip passes gradient only strictly inside the interval") {
  ad::Tape tape;
  ad::Var x = tape.leaf("x", Tensor({4}, {0.0, -2.0, 3.0, 0.9}));
  ad::GradientMap grads = tape.backward(tape.sum(tape.clip(x, -1.0, 1.0)));
  CHECK(grads.at("x")[0] == 1.0);
  CHECK(grads.at("x")[1] == 0.0);
  CHECK(grads.at("x")[2] == 0.0);
  CHECK(grads.at("x")[3] == 1.0);
}

TEST_CASE("clip mask matches finite differences away from the kinks") {
  Rng rng(21);
  Tensor x(Shape{16});
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = rng.uniform(-2.0, 2.0);
    // keep every coordinate at least 1e-3 from the clip bounds
    while (std::fabs(std::fabs(v) - 1.0) < 5e-3) v = rng.uniform(-2.0, 2.0);
    x[i] = v;
  }
  check_gradient(
      [](ad::Tape& t, ad::Var v) { return t.sum(t.square(t.clip(v, -1.0, 1.0))); },
      x);
}

TEST_CASE("gradient accumulation for repeated parameter use is exact") {
  Tensor w({2}, {1.5, -0.5});
  ad::Tape tape;
  ad::Var wv = tape.leaf("w", w);
  // w used twice: sum(w) + sum(w . w)
  ad::Var loss = tape.add(tape.sum(wv), tape.sum(tape.mul(wv, wv)));
  ad::GradientMap grads = tape.backward(loss);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(grads.at("w")[i] == 1.0 + 2.0 * w[i]);
  }
  // leaf() with the same name returns the same node
  ad::Tape t2;
  ad::Var a = t2.leaf("p", w);
  ad::Var b = t2.leaf("p", w);
  CHECK(a.id == b.id);
}

TEST_CASE("unreachable leaves report zero gradients") {
  ad::Tape tape;
  ad::Var used = tape.leaf("used", Tensor({1}, {2.0}));
  ad::Var unused = tape.leaf("unused", Tensor({3}, {1.0, 1.0, 1.0}));
  (void)unused;
  ad::GradientMap grads = tape.backward(tape.sum(tape.square(used)));
  CHECK(grads.at("used")[0] == 4.0);
  REQUIRE(grads.count("unused") == 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at("unused")[i] == 0.0);
}

TEST_CASE("random three-layer composition matches finite differences") {
  Rng rng(31);
  Tensor x = random_tensor({6}, rng);
  Tensor a = random_tensor({6}, rng);
  Tensor b = random_tensor({6}, rng, 0.5, 1.5);
  check_gradient(
      [&](ad::Tape& t, ad::Var v) {
        ad::Var h1 = t.tanh(t.mul(v, t.constant(a)));
        ad::Var h2 = t.exp(t.mul_scalar(h1, 0.7));
        ad::Var h3 = t.div(h2, t.constant(b));
        return t.sum(t.square(h3));
      },
      x, 1e-6);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(41);
  SUBCASE("exp") {
    check_gradient([](ad::Tape& t, ad::Var v) { return t.sum(t.exp(v)); },
                   random_tensor({8}, rng));
  }
  SUBCASE("log") {
    check_gradient([](ad::Tape& t, ad::Var v) { return t.sum(t.log(v)); },
                   random_tensor({8}, rng, 0.5, 2.0));
  }
  SUBCASE("tanh") {
    check_gradient([](ad::Tape& t, ad::Var v) { return t.sum(t.tanh(v)); },
                   random_tensor({8}, rng));
  }
  SUBCASE("square and mean") {
    check_gradient([](ad::Tape& t, ad::Var v) { return t.mean(t.square(v)); },
                   random_tensor({8}, rng));
  }
  SUBCASE("div both sides") {
    Tensor denom = random_tensor({8}, rng, 1.0, 2.0);
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          return t.sum(t.div(t.constant(denom), v));
        },
        random_tensor({8}, rng, 0.7, 1.7));
  }
  SUBCASE("leaky_relu") {
    check_gradient(
        [](ad::Tape& t, ad::Var v) { return t.sum(t.square(t.leaky_relu(v, 0.2))); },
        random_tensor({12}, rng));
  }
  SUBCASE("axis_forward_diff") {
    check_gradient(
        [](ad::Tape& t, ad::Var v) {
          ad::Var r = t.reshape(v, {1, 2, 2, 3});
          ad::Var acc = t.sum(t.square(t.axis_forward_diff(r, 3)));
          return t.add(acc, t.sum(t.square(t.axis_forward_diff(r, 1))));
        },
        random_tensor({12}, rng));
  }
  SUBCASE("slice_channel") {
    check_gradient(
        [](ad::Tape& t, ad::Var v) {
          ad::Var r = t.reshape(v, {3, 1, 2, 2});
          return t.sum(t.square(t.slice_channel(r, 1)));
        },
        random_tensor({12}, rng));
  }
  SUBCASE("concat_channels") {
    Rng rng2(42);
    Tensor other = random_tensor({1, 2, 2, 2}, rng2);
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          ad::Var r = t.reshape(v, {1, 2, 2, 2});
          return t.sum(t.square(t.concat_channels(r, t.constant(other))));
        },
        random_tensor({8}, rng));
  }
}

TEST_CASE("conv3d gradients match finite differences") {
  Rng rng(51);
  Tensor x = random_tensor({2, 4, 4, 4}, rng);
  Tensor k = random_tensor({3, 2, 3, 3, 3}, rng);
  Tensor bias = random_tensor({3}, rng);

  SUBCASE("w.r.t. input, stride 1") {
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          return t.sum(t.square(t.conv3d(v, t.constant(k), 1, 1)));
        },
        x);
  }
  SUBCASE("w.r.t. kernel, stride 2") {
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          return t.sum(t.square(t.conv3d(t.constant(x), v, 2, 1)));
        },
        k);
  }
  SUBCASE("w.r.t. bias") {
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          ad::Var y = t.conv3d(t.constant(x), t.constant(k), 1, 1);
          return t.sum(t.square(t.add_channel_bias(y, v)));
        },
        bias);
  }
}

TEST_CASE("upsample gradient matches finite differences") {
  Rng rng(61);
  check_gradient(
      [](ad::Tape& t, ad::Var v) {
        return t.sum(t.square(t.upsample_trilinear(v, 2)));
      },
      random_tensor({2, 2, 2, 2}, rng));
}

TEST_CASE("warp gradients match finite differences off the lattice") {
  Rng rng(71);
  Tensor vol = random_tensor({4, 4, 4}, rng, 0.0, 1.0);
  // Fractional displacements keep sample points away from lattice kinks.
  Tensor field(Shape{3, 4, 4, 4});
  for (std::size_t i = 0; i < field.size(); ++i) {
    field[i] = rng.uniform(-0.45, 0.45);
    if (std::fabs(field[i] - std::round(field[i])) < 0.05) field[i] += 0.07;
  }

  SUBCASE("w.r.t. the volume") {
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          return t.sum(t.square(t.warp(v, t.constant(field))));
        },
        vol);
  }
  SUBCASE("w.r.t. the field") {
    check_gradient(
        [&](ad::Tape& t, ad::Var v) {
          return t.sum(t.square(t.warp(t.constant(vol), v)));
        },
        field);
  }
}

TEST_CASE("tape refuses reuse after backward") {
  ad::Tape tape;
  ad::Var x = tape.leaf("x", Tensor({1}, {1.0}));
  tape.backward(tape.sum(x));
  CHECK_THROWS_AS(tape.sum(x), ShapeError);
}
