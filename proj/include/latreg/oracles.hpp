#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "latreg/fields.hpp"
#include "latreg/labelmap.hpp"
#include "latreg/tensor.hpp"

namespace latreg::oracle {

// Brute-force references for tests and acceptance runs. These share data
// types with the library but none of its arithmetic kernels.

struct FdConfig {
  double step = 1e-5;       // central-difference step
  double tolerance = 1e-4;  // relative error bound per check
};

// Central finite differences of a scalar function, one coordinate at a time.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double step = 1e-5);

// Same, restricted to a coordinate subset (flat indices); other entries are 0.
Tensor fd_gradient_at(const std::function<double(const Tensor&)>& f,
                      const Tensor& x, const std::vector<std::size_t>& coords,
                      double step = 1e-5);

// |a - b| / max(|a|, |b|, floor) maximized over the given coordinates (or all).
double max_rel_error(const Tensor& analytic, const Tensor& numeric,
                     double floor = 1e-4);
double max_rel_error_at(const Tensor& analytic, const Tensor& numeric,
                        const std::vector<std::size_t>& coords,
                        double floor = 1e-4);

// Nested-loop voxel counting versions of the overlap and folding metrics.
double brute_dice_percent(const LabelMap& a, const LabelMap& b);
double brute_njd_percent(const DisplacementField& u);

// --- variance probe -----------------------------------------------------------

struct VarianceProbeRow {
  std::int64_t n = 0;
  double std_unscaled = 0.0;  // within-group centered log-likelihood spread, s = 1
  double std_scaled = 0.0;    // same with s = sqrt(N)
};

struct VarianceProbeResult {
  std::vector<VarianceProbeRow> rows;
  double fitted_exponent = 0.0;  // log-log slope of the unscaled series
};

// Monte-Carlo spread of within-group centered log-likelihoods for a unit
// Gaussian policy (mu = 0, sigma = 1, tau = 1), where each per-dimension
// summand is (eps_i^2 + log 2 pi) / 2.
VarianceProbeResult ldvn_variance_probe(const std::vector<std::int64_t>& ns,
                                        int groups, int trajectories,
                                        std::uint64_t seed);

void write_probe_csv(const std::filesystem::path& path,
                     const VarianceProbeResult& result);

}  // namespace latreg::oracle
