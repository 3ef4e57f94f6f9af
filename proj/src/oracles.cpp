#include "latreg/oracles.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "latreg/errors.hpp"
#include "latreg/rng.hpp"

namespace latreg::oracle {

Tensor fd_gradient(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double step) {
  std::vector<std::size_t> all(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) all[i] = i;
  return fd_gradient_at(f, x, all, step);
}

Tensor fd_gradient_at(const std::function<double(const Tensor&)>& f,
                      const Tensor& x, const std::vector<std::size_t>& coords,
                      double step) {
  if (!(step > 0.0)) throw ConfigError("fd_gradient: step must be > 0");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i : coords) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double hi = f(probe);
    probe[i] = saved - step;
    const double lo = f(probe);
    probe[i] = saved;
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw NumericError("fd_gradient: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

double max_rel_error(const Tensor& analytic, const Tensor& numeric,
                     double floor) {
  std::vector<std::size_t> all(analytic.size());
  for (std::size_t i = 0; i < analytic.size(); ++i) all[i] = i;
  return max_rel_error_at(analytic, numeric, all, floor);
}

double max_rel_error_at(const Tensor& analytic, const Tensor& numeric,
                        const std::vector<std::size_t>& coords, double floor) {
  require_same_shape(analytic, numeric, "max_rel_error");
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double denom =
        std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), floor});
    worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

double brute_dice_percent(const LabelMap& a, const LabelMap& b) {
  double dice_sum = 0.0;
  int scored = 0;
  for (int cls = 1; cls <= a.num_classes(); ++cls) {
    long in_a = 0, in_b = 0, in_both = 0;
    for (int d = 0; d < a.depth(); ++d) {
      for (int h = 0; h < a.height(); ++h) {
        for (int w = 0; w < a.width(); ++w) {
          const bool fa = a.at(d, h, w) == cls;
          const bool fb = b.at(d, h, w) == cls;
          if (fa) ++in_a;
          if (fb) ++in_b;
          if (fa && fb) ++in_both;
        }
      }
    }
    if (in_a == 0 && in_b == 0) continue;
    dice_sum += 2.0 * static_cast<double>(in_both) /
                static_cast<double>(in_a + in_b);
    ++scored;
  }
  if (scored == 0) return 100.0;
  return 100.0 * dice_sum / static_cast<double>(scored);
}

double brute_njd_percent(const DisplacementField& u) {
  const int dn = u.depth(), hn = u.height(), wn = u.width();
  long negative = 0;
  for (int d = 0; d < dn; ++d) {
    const int dd = d < dn - 1 ? d : d - 1;
    for (int h = 0; h < hn; ++h) {
      const int hh = h < hn - 1 ? h : h - 1;
      for (int w = 0; w < wn; ++w) {
        const int ww = w < wn - 1 ? w : w - 1;
        double jac[3][3];
        for (int c = 0; c < 3; ++c) {
          jac[c][0] = u.component(c, dd + 1, h, w) - u.component(c, dd, h, w);
          jac[c][1] = u.component(c, d, hh + 1, w) - u.component(c, d, hh, w);
          jac[c][2] = u.component(c, d, h, ww + 1) - u.component(c, d, h, ww);
          jac[c][c] += 1.0;
        }
        // Rule of Sarrus, grouped differently from the library's cofactors.
        const double det = jac[0][0] * jac[1][1] * jac[2][2] +
                           jac[0][1] * jac[1][2] * jac[2][0] +
                           jac[0][2] * jac[1][0] * jac[2][1] -
                           jac[0][2] * jac[1][1] * jac[2][0] -
                           jac[0][1] * jac[1][0] * jac[2][2] -
                           jac[0][0] * jac[1][2] * jac[2][1];
        if (det < 0.0) ++negative;
      }
    }
  }
  return 100.0 * static_cast<double>(negative) /
         static_cast<double>(static_cast<long>(dn) * hn * wn);
}

VarianceProbeResult ldvn_variance_probe(const std::vector<std::int64_t>& ns,
                                        int groups, int trajectories,
                                        std::uint64_t seed) {
  if (trajectories < 2) {
    throw ConfigError("ldvn_variance_probe: need at least 2 trajectories");
  }
  if (groups < 2) throw ConfigError("ldvn_variance_probe: need at least 2 groups");
  VarianceProbeResult out;
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  for (std::int64_t n : ns) {
    if (n < 1) throw ConfigError("ldvn_variance_probe: N must be >= 1");
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(n)));
    const double s = std::sqrt(static_cast<double>(n));
    double sum_sq = 0.0;
    std::size_t count = 0;
    std::vector<double> lp(static_cast<std::size_t>(trajectories));
    for (int g = 0; g < groups; ++g) {
      for (int j = 0; j < trajectories; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const double e = rng.normal();
          acc += 0.5 * (e * e + log_2pi);
        }
        lp[static_cast<std::size_t>(j)] = -acc;  // log pi with s = 1
      }
      double mean = 0.0;
      for (double v : lp) mean += v;
      mean /= static_cast<double>(trajectories);
      for (double v : lp) {
        const double centered = v - mean;
        sum_sq += centered * centered;
        ++count;
      }
    }
    VarianceProbeRow row;
    row.n = n;
    row.std_unscaled = std::sqrt(sum_sq / static_cast<double>(count));
    // Applying s rescales every centered value by exactly 1/s.
    row.std_scaled = row.std_unscaled / s;
    out.rows.push_back(row);
  }

  // Least-squares slope of log(std) against log(N) for the unscaled series.
  const auto m = static_cast<double>(out.rows.size());
  if (out.rows.size() >= 2) {
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const VarianceProbeRow& row : out.rows) {
      const double x = std::log(static_cast<double>(row.n));
      const double y = std::log(row.std_unscaled);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    out.fitted_exponent = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  }
  return out;
}

void write_probe_csv(const std::filesystem::path& path,
                     const VarianceProbeResult& result) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  std::fprintf(f, "N,std_unscaled,std_scaled,exponent\n");
  for (const VarianceProbeRow& row : result.rows) {
    std::fprintf(f, "%lld,%.17g,%.17g,%.17g\n",
                 static_cast<long long>(row.n), row.std_unscaled,
                 row.std_scaled, result.fitted_exponent);
  }
  std::fclose(f);
}

}  // namespace latreg::oracle
