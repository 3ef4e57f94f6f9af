#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "latreg/autodiff.hpp"
#include "latreg/fields.hpp"
#include "latreg/rng.hpp"
#include "latreg/tensor.hpp"

namespace latreg {

struct BackboneConfig {
  int levels = 3;
  std::vector<int> channels = {8, 16, 32};  // per level, coarsest last
  int input_channels = 2;                   // concatenated moving/fixed pair
  double lambda_scale = 10.0;               // tanh bound on the mean head
  double sigma_min = -10.0;                 // clip bounds on log(sigma)
  double sigma_max = 3.0;

  int downsample_factor() const { return 1 << (levels - 1); }
  void validate() const;
};

/// Gaussian policy over the latent grid: z ~ N(mu, (tau * sigma)^2) with
/// mu bounded by tanh * lambda_scale and log(sigma) clipped.
struct LatentPolicy {
  Tensor mu;         // (C_L, D_L, H_L, W_L)
  Tensor log_sigma;  // same shape
  double lambda_scale = 10.0;
  double sigma_min = -10.0;
  double sigma_max = 3.0;
  double tau = 1.0;

  std::int64_t dimension() const { return static_cast<std::int64_t>(mu.size()); }
};

struct SampleResult {
  Tensor z;
  Tensor eps;
};

// z = mu + tau * (sigma . eps). tau = 0 returns mu bit-exactly.
SampleResult sample_latent(const LatentPolicy& policy, Rng& rng);

// Scaled Gaussian log-density
//   -(1/2s) * sum_i [ ((z_i - mu_i)/(tau sigma_i))^2 + log(2 pi tau^2 sigma_i^2) ].
// tau = 0 has no density and raises an error.
double log_pi(const LatentPolicy& policy, const Tensor& z, double s);

// Graph form: differentiable w.r.t. mu and log_sigma; z enters detached.
ad::Var log_pi_node(ad::Tape& tape, ad::Var mu, ad::Var log_sigma,
                    const Tensor& z, double tau, double s);

/// Ordered named parameter collection. Order is fixed at construction and
/// drives checkpoint layout and optimizer state alignment.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t total_elements() const;

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct EncodeResult {
  std::vector<ad::Var> skips;  // f_1 .. f_{L-1}, fine to coarse
  ad::Var mu;
  ad::Var log_sigma;
};

/// Three-stage convolutional encoder/decoder with skip connections, a
/// Gaussian head pair on the coarsest feature, and a zero-initialized flow
/// head so the untrained network yields the identity transform.
class RegistrationNet {
 public:
  RegistrationNet(BackboneConfig cfg, std::uint64_t init_seed);

  // Builds the encoder graph for one pair; parameters become tape leaves.
  EncodeResult encode(ad::Tape& tape, const Tensor& moving,
                      const Tensor& fixed) const;
  // Builds the decoder graph from skip features and a latent node.
  ad::Var decode(ad::Tape& tape, const std::vector<ad::Var>& skips,
                 ad::Var z) const;

  // Value-level helpers running on a scratch tape.
  LatentPolicy encode_policy(const Tensor& moving, const Tensor& fixed,
                             double tau) const;
  DisplacementField forward_field(const Tensor& moving,
                                  const Tensor& fixed) const;  // tau = 0 pass

  const BackboneConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static RegistrationNet load(const std::filesystem::path& path,
                              const BackboneConfig& cfg);

 private:
  BackboneConfig cfg_;
  ParamSet params_;
};

// Checkpoint container format ("MSK1"): header magic, version u32, parameter
// count u32, then per parameter: name length u16, name bytes, rank u8,
// extents u32 each, little-endian f64 payload.
void save_params(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_params(const std::filesystem::path& path);

}  // namespace latreg
