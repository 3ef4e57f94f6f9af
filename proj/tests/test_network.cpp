#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "latreg/errors.hpp"
#include "latreg/network.hpp"
#include "latreg/objectives.hpp"
#include "latreg/optimizer.hpp"
#include "latreg/oracles.hpp"
#include "latreg/rng.hpp"

using namespace latreg;

namespace {

Tensor random_volume(int n, Rng& rng) {
  Tensor v({n, n, n});
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform(0.0, 1.0);
  return v;
}

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.channels = {2, 3, 4};
  return cfg;
}

}  // namespace

TEST_CASE("encode produces the documented shape chain") {
  Rng rng(5);
  RegistrationNet net(BackboneConfig{}, 42);
  for (int n : {8, 16, 32}) {
    Tensor moving = random_volume(n, rng);
    Tensor fixed = random_volume(n, rng);
    ad::Tape tape;
    EncodeResult enc = net.encode(tape, moving, fixed);
    REQUIRE(enc.skips.size() == 2);
    CHECK(enc.skips[0].value().shape() == Shape{8, n, n, n});
    CHECK(enc.skips[1].value().shape() == Shape{16, n / 2, n / 2, n / 2});
    CHECK(enc.mu.value().shape() == Shape{32, n / 4, n / 4, n / 4});
    CHECK(enc.log_sigma.value().shape() == Shape{32, n / 4, n / 4, n / 4});
  }
}

TEST_CASE("indivisible extents are rejected") {
  Rng rng(6);
  RegistrationNet net(BackboneConfig{}, 42);
  Tensor moving = random_volume(10, rng);  // 10 % 4 != 0
  Tensor fixed = random_volume(10, rng);
  ad::Tape tape;
  CHECK_THROWS_AS(net.encode(tape, moving, fixed), ShapeError);
}

TEST_CASE("zeroed mean head forces mu to zero") {
  Rng rng(7);
  RegistrationNet net(tiny_config(), 43);
  Tensor& w = net.params().get("enc.mu_head.w");
  std::fill(w.data(), w.data() + w.size(), 0.0);
  Tensor& b = net.params().get("enc.mu_head.b");
  std::fill(b.data(), b.data() + b.size(), 0.0);
  LatentPolicy p = net.encode_policy(random_volume(8, rng), random_volume(8, rng), 0.0);
  for (std::size_t i = 0; i < p.mu.size(); ++i) CHECK(p.mu[i] == 0.0);
}

TEST_CASE("policy outputs respect their construction bounds") {
  Rng rng(8);
  RegistrationNet net(BackboneConfig{}, 44);
  // Exaggerate the heads so the bounds actually bite.
  for (const char* name : {"enc.mu_head.w", "enc.logsig_head.w"}) {
    Tensor& w = net.params().get(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-30.0, 30.0);
  }
  LatentPolicy p = net.encode_policy(random_volume(8, rng), random_volume(8, rng), 1.0);
  const BackboneConfig& cfg = net.config();
  for (std::size_t i = 0; i < p.mu.size(); ++i) {
    CHECK(std::fabs(p.mu[i]) <= cfg.lambda_scale);
    CHECK(p.log_sigma[i] >= cfg.sigma_min);
    CHECK(p.log_sigma[i] <= cfg.sigma_max);
  }
}

TEST_CASE("sampling") {
  LatentPolicy p;
  p.mu = Tensor({4}, {0.5, -1.0, 2.0, 0.0});
  p.log_sigma = Tensor({4}, {0.0, 0.3, -0.5, 1.0});

  SUBCASE("tau = 0 returns mu bit-exactly") {
    p.tau = 0.0;
    Rng rng(9);
    SampleResult r = sample_latent(p, rng);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.z[i] == p.mu[i]);
  }
  SUBCASE("fixed seed reproduces the draw") {
    p.tau = 0.7;
    Rng a(123), b(123);
    SampleResult ra = sample_latent(p, a);
    SampleResult rb = sample_latent(p, b);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(ra.z[i] == rb.z[i]);
      CHECK(ra.eps[i] == rb.eps[i]);
    }
  }
  SUBCASE("standard-normal statistics at tau = 1") {
    LatentPolicy unit;
    unit.mu = Tensor({100000});
    unit.log_sigma = Tensor({100000});
    unit.tau = 1.0;
    Rng rng(77);
    SampleResult r = sample_latent(unit, rng);
    double mean = 0.0;
    for (std::size_t i = 0; i < r.z.size(); ++i) mean += r.z[i];
    mean /= static_cast<double>(r.z.size());
    double var = 0.0;
    for (std::size_t i = 0; i < r.z.size(); ++i) {
      var += (r.z[i] - mean) * (r.z[i] - mean);
    }
    var /= static_cast<double>(r.z.size());
    CHECK(std::fabs(mean) <= 0.02);
    CHECK(std::sqrt(var) >= 0.98);
    CHECK(std::sqrt(var) <= 1.02);
  }
}

TEST_CASE("decoder contract") {
  Rng rng(10);
  RegistrationNet net(tiny_config(), 45);
  Tensor moving = random_volume(8, rng);
  Tensor fixed = random_volume(8, rng);

  SUBCASE("zero flow head yields the identity field with the right shape") {
    ad::Tape tape;
    EncodeResult enc = net.encode(tape, moving, fixed);
    ad::Var u = net.decode(tape, enc.skips, enc.mu);
    CHECK(u.value().shape() == Shape{3, 8, 8, 8});
    for (std::size_t i = 0; i < u.value().size(); ++i) {
      CHECK(u.value()[i] == 0.0);
    }
  }

  SUBCASE("after one warm-up step, perturbing z changes the field") {
    WarmupWeights weights;
    AdamOptimizer opt(1e-3);
    {
      ad::Tape tape;
      EncodeResult enc = net.encode(tape, moving, fixed);
      ad::Var u0 = net.decode(tape, enc.skips, enc.mu);
      WarmTerms terms =
          warmup_loss_node(tape, fixed, moving, u0, enc.mu, enc.log_sigma, weights);
      ad::GradientMap grads = tape.backward(terms.total);
      opt.step(net.params(), grads);
    }
    ad::Tape tape;
    EncodeResult enc = net.encode(tape, moving, fixed);
    ad::Var u_base = net.decode(tape, enc.skips, enc.mu);
    Tensor z_shift = enc.mu.value();
    Rng rng2(11);
    for (std::size_t i = 0; i < z_shift.size(); ++i) z_shift[i] += rng2.normal();
    ad::Var u_pert = net.decode(tape, enc.skips, tape.constant(z_shift));
    double diff = 0.0;
    for (std::size_t i = 0; i < u_base.value().size(); ++i) {
      diff += std::fabs(u_base.value()[i] - u_pert.value()[i]);
    }
    CHECK(diff > 0.0);
  }
}

TEST_CASE("log_pi") {
  SUBCASE("standard normal at the origin") {
    LatentPolicy p;
    p.mu = Tensor({1});
    p.log_sigma = Tensor({1});
    p.tau = 1.0;
    const double expected = -0.5 * std::log(2.0 * std::numbers::pi);
    CHECK(log_pi(p, Tensor({1}), 1.0) ==
          doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("doubling s halves the value exactly") {
    Rng rng(12);
    LatentPolicy p;
    p.mu = Tensor({8});
    p.log_sigma = Tensor({8});
    for (std::size_t i = 0; i < 8; ++i) {
      p.mu[i] = rng.uniform(-1.0, 1.0);
      p.log_sigma[i] = rng.uniform(-0.5, 0.5);
    }
    p.tau = 0.8;
    Tensor z({8});
    for (std::size_t i = 0; i < 8; ++i) z[i] = rng.uniform(-1.0, 1.0);
    CHECK(log_pi(p, z, 2.0) == doctest::Approx(log_pi(p, z, 1.0) / 2.0).epsilon(1e-15));
  }
  SUBCASE("z = mu leaves only the normalizer") {
    LatentPolicy p;
    p.mu = Tensor({3}, {0.3, -0.2, 1.0});
    p.log_sigma = Tensor({3}, {0.1, -0.1, 0.4});
    p.tau = 0.5;
    double expected = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      expected += std::log(2.0 * std::numbers::pi * p.tau * p.tau) +
                  2.0 * p.log_sigma[i];
    }
    expected *= -0.5;
    CHECK(log_pi(p, p.mu, 1.0) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("tau = 0 has no density") {
    LatentPolicy p;
    p.mu = Tensor({1});
    p.log_sigma = Tensor({1});
    p.tau = 0.0;
    CHECK_THROWS_AS(log_pi(p, Tensor({1}), 1.0), ConfigError);
  }
  SUBCASE("matches an independent per-dimension density oracle") {
    Rng rng(13);
    LatentPolicy p;
    p.mu = Tensor({64});
    p.log_sigma = Tensor({64});
    Tensor z({64});
    for (std::size_t i = 0; i < 64; ++i) {
      p.mu[i] = rng.uniform(-2.0, 2.0);
      p.log_sigma[i] = rng.uniform(-1.0, 1.0);
      z[i] = rng.uniform(-3.0, 3.0);
    }
    p.tau = 1.3;
    double oracle_sum = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
      const double sd = p.tau * std::exp(p.log_sigma[i]);
      const double diff = z[i] - p.mu[i];
      // scalar Gaussian log-density with std sd
      oracle_sum += -0.5 * std::log(2.0 * std::numbers::pi * sd * sd) -
                    0.5 * diff * diff / (sd * sd);
    }
    CHECK(std::fabs(log_pi(p, z, 1.0) - oracle_sum) <= 1e-10);
  }
  SUBCASE("graph gradient w.r.t. mu matches the closed form and FD") {
    Rng rng(14);
    const double tau = 0.9, s = 3.0;
    Tensor mu({6}), ls({6}), z({6});
    for (std::size_t i = 0; i < 6; ++i) {
      mu[i] = rng.uniform(-1.0, 1.0);
      ls[i] = rng.uniform(-0.4, 0.4);
      z[i] = rng.uniform(-2.0, 2.0);
    }
    ad::Tape tape;
    ad::Var mu_v = tape.leaf("mu", mu);
    ad::Var ls_v = tape.leaf("ls", ls);
    ad::GradientMap grads =
        tape.backward(log_pi_node(tape, mu_v, ls_v, z, tau, s));
    for (std::size_t i = 0; i < 6; ++i) {
      const double sigma = std::exp(ls[i]);
      const double closed = (z[i] - mu[i]) / (s * tau * tau * sigma * sigma);
      CHECK(grads.at("mu")[i] == doctest::Approx(closed).epsilon(1e-10));
    }
    auto f = [&](const Tensor& probe) {
      LatentPolicy p;
      p.mu = probe;
      p.log_sigma = ls;
      p.tau = tau;
      return log_pi(p, z, s);
    };
    Tensor fd = oracle::fd_gradient(f, mu, 1e-5);
    CHECK(oracle::max_rel_error(grads.at("mu"), fd) <= 1e-6);
  }
}

TEST_CASE("checkpoint round trip and corruption handling") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "latreg_ckpt_test";
  fs::create_directories(dir);
  const fs::path path = dir / "net.msk";

  Rng rng(15);
  RegistrationNet net(tiny_config(), 46);
  net.save(path);
  RegistrationNet loaded = RegistrationNet::load(path, tiny_config());
  for (const auto& [name, tensor] : net.params().items()) {
    const Tensor& other = loaded.params().get(name);
    REQUIRE(other.same_shape(tensor));
    for (std::size_t i = 0; i < tensor.size(); ++i) CHECK(other[i] == tensor[i]);
  }

  SUBCASE("bad magic is reported at offset 0") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_WITH_AS(RegistrationNet::load(path, tiny_config()),
                         doctest::Contains("bad magic at offset 0"), DataError);
  }
  SUBCASE("config shape mismatch is detected") {
    BackboneConfig other = tiny_config();
    other.channels = {3, 4, 5};
    CHECK_THROWS_AS(RegistrationNet::load(path, other), DataError);
  }
  fs::remove_all(dir);
}
