#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "latreg/errors.hpp"
#include "latreg/oracles.hpp"
#include "latreg/rng.hpp"

using namespace latreg;

TEST_CASE("fd_gradient examples") {
  SUBCASE("sum of squares") {
    auto f = [](const Tensor& x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * x[i];
      return acc;
    };
    Tensor x({2}, {1.0, 2.0});
    Tensor g = oracle::fd_gradient(f, x);
    CHECK(std::fabs(g[0] - 2.0) <= 1e-8);
    CHECK(std::fabs(g[1] - 4.0) <= 1e-8);
  }
  SUBCASE("constant function has a zero gradient") {
    auto f = [](const Tensor&) { return 3.25; };
    Tensor g = oracle::fd_gradient(f, Tensor({4}));
    for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == 0.0);
  }
  SUBCASE("plain sum has an all-ones gradient") {
    auto f = [](const Tensor& x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
      return acc;
    };
    Tensor x({3}, {5.0, -1.0, 0.5});
    Tensor g = oracle::fd_gradient(f, x);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::fabs(g[i] - 1.0) <= 1e-9);
    }
  }
  SUBCASE("non-finite values are reported") {
    auto f = [](const Tensor& x) { return std::log(x[0]); };
    CHECK_THROWS_AS(oracle::fd_gradient(f, Tensor({1}, {0.0})), NumericError);
  }
}

TEST_CASE("brute metrics on trivial inputs") {
  LabelMap m(4, 4, 4, 2);
  m.set(1, 1, 1, 1);
  m.set(2, 2, 2, 2);
  CHECK(oracle::brute_dice_percent(m, m) == 100.0);
  CHECK(oracle::brute_njd_percent(DisplacementField::zeros(4, 4, 4)) == 0.0);
}

TEST_CASE("variance probe behaviour") {
  SUBCASE("N = 1 leaves scaled equal to unscaled") {
    oracle::VarianceProbeResult r =
        oracle::ldvn_variance_probe({1}, 32, 4, 99);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].std_scaled == r.rows[0].std_unscaled);
  }
  SUBCASE("unscaled spread fits a square-root law; scaled spread is flat") {
    oracle::VarianceProbeResult r =
        oracle::ldvn_variance_probe({100, 1000, 10000}, 64, 6, 7);
    CHECK(r.fitted_exponent >= 0.45);
    CHECK(r.fitted_exponent <= 0.55);
    double lo = r.rows[0].std_scaled, hi = r.rows[0].std_scaled;
    for (const auto& row : r.rows) {
      lo = std::min(lo, row.std_scaled);
      hi = std::max(hi, row.std_scaled);
    }
    CHECK(hi / lo <= 1.5);
  }
  SUBCASE("seed-deterministic") {
    oracle::VarianceProbeResult a = oracle::ldvn_variance_probe({100}, 16, 4, 5);
    oracle::VarianceProbeResult b = oracle::ldvn_variance_probe({100}, 16, 4, 5);
    CHECK(a.rows[0].std_unscaled == b.rows[0].std_unscaled);
  }
  SUBCASE("csv emission") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "latreg_probe.csv";
    oracle::VarianceProbeResult r = oracle::ldvn_variance_probe({10, 100}, 8, 3, 1);
    oracle::write_probe_csv(path, r);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "N,std_unscaled,std_scaled,exponent");
    int rows = 0;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) ++rows;
    }
    CHECK(rows == 2);
    fs::remove(path);
  }
}
