#pragma once

#include "latreg/autodiff.hpp"
#include "latreg/fields.hpp"
#include "latreg/labelmap.hpp"
#include "latreg/network.hpp"
#include "latreg/tensor.hpp"

namespace latreg {

struct WarmupWeights {
  double lambda_reg = 0.1;  // weight of the diffusion regularizer
  double beta_kl = 1e-3;    // weight of the latent KL penalty
  void validate() const;
};

// Mean over voxels of the squared intensity difference.
double mse_similarity(const Tensor& fixed, const Tensor& warped);

// Mean over components and voxels of the squared forward-difference gradient
// magnitude: sum of squared diffs over the three axes divided by 3*|Omega|.
// Requires spatial extents >= 2.
double diffusion_regularizer(const DisplacementField& u);

// Per-dimension factorized Gaussian KL against the standard normal:
// (1/2N) * sum_i (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1). tau plays no role.
double kl_to_standard_normal(const LatentPolicy& policy);

// One-hot encodes the moving labels, warps each foreground channel
// trilinearly, and scores 1 - mean_k dice with smoothing 1e-5.
double soft_dice_loss(const LabelMap& fixed, const LabelMap& moving,
                      const DisplacementField& u);

// Mean over foreground classes of 2|A n B|/(|A|+|B|) in percent, computed on
// hard (nearest-warped) labels. Classes empty in both maps are skipped;
// classes empty in exactly one count as 0. All-empty maps score 100.
double hard_dice_percent(const LabelMap& fixed, const LabelMap& warped);

// mse + lambda_reg * diffusion + beta_kl * kl, with u the tau = 0 field.
double warmup_loss(const Tensor& fixed, const Tensor& moving,
                   const DisplacementField& u, const LatentPolicy& policy,
                   const WarmupWeights& weights);

// --- graph builders ---------------------------------------------------------

ad::Var mse_node(ad::Tape& tape, ad::Var fixed, ad::Var warped);
ad::Var diffusion_node(ad::Tape& tape, ad::Var field);
ad::Var kl_node(ad::Tape& tape, ad::Var mu, ad::Var log_sigma);
ad::Var soft_dice_node(ad::Tape& tape, const Tensor& fixed_onehot,
                       const Tensor& moving_onehot, ad::Var field);

struct WarmTerms {
  ad::Var total;
  ad::Var mse;
  ad::Var reg;
  ad::Var kl;
};
WarmTerms warmup_loss_node(ad::Tape& tape, const Tensor& fixed,
                           const Tensor& moving, ad::Var u, ad::Var mu,
                           ad::Var log_sigma, const WarmupWeights& weights);

constexpr double kDiceSmoothing = 1e-5;

}  // namespace latreg
