#include "latreg/objectives.hpp"

#include <cmath>

#include "latreg/errors.hpp"

namespace latreg {

void WarmupWeights::validate() const {
  if (!(lambda_reg >= 0.0) || !std::isfinite(lambda_reg)) {
    throw ConfigError("lambda_reg must be finite and >= 0");
  }
  if (!(beta_kl >= 0.0) || !std::isfinite(beta_kl)) {
    throw ConfigError("beta_kl must be finite and >= 0");
  }
}

double mse_similarity(const Tensor& fixed, const Tensor& warped) {
  require_same_shape(fixed, warped, "mse_similarity");
  double acc = 0.0;
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    const double d = fixed[i] - warped[i];
    acc += d * d;
  }
  return acc / static_cast<double>(fixed.size());
}

double diffusion_regularizer(const DisplacementField& u) {
  const Tensor& t = u.tensor();
  if (t.extent(1) < 2 || t.extent(2) < 2 || t.extent(3) < 2) {
    throw ShapeError("diffusion_regularizer: spatial extents must be >= 2, got " +
                     shape_to_string(t.shape()));
  }
  double acc = 0.0;
  for (int axis = 1; axis <= 3; ++axis) {
    Tensor d = axis_forward_diff(t, axis);
    for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * d[i];
  }
  // Mean over components and voxels of the squared gradient magnitude.
  return acc / static_cast<double>(t.size());
}

double kl_to_standard_normal(const LatentPolicy& policy) {
  const Tensor& mu = policy.mu;
  const Tensor& ls = policy.log_sigma;
  require_same_shape(mu, ls, "kl_to_standard_normal");
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double sigma2 = std::exp(2.0 * ls[i]);
    acc += mu[i] * mu[i] + sigma2 - 2.0 * ls[i] - 1.0;
  }
  return acc / (2.0 * static_cast<double>(mu.size()));
}

namespace {

void require_label_grids(const LabelMap& a, const LabelMap& b, const char* op) {
  if (!a.same_grid(b)) {
    throw ShapeError(std::string(op) + ": label grids differ");
  }
  if (a.num_classes() != b.num_classes()) {
    throw ShapeError(std::string(op) + ": class count mismatch, " +
                     std::to_string(a.num_classes()) + " vs " +
                     std::to_string(b.num_classes()));
  }
}

}  // namespace

double soft_dice_loss(const LabelMap& fixed, const LabelMap& moving,
                      const DisplacementField& u) {
  require_label_grids(fixed, moving, "soft_dice_loss");
  const Tensor warped = warp_volume(moving.one_hot(), u, WarpMode::Trilinear);
  const Tensor target = fixed.one_hot();
  const int k = fixed.num_classes();
  const std::size_t voxels = warped.size() / static_cast<std::size_t>(k);
  double dice_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    const double* p = warped.data() + static_cast<std::size_t>(c) * voxels;
    const double* g = target.data() + static_cast<std::size_t>(c) * voxels;
    double inter = 0.0, p_sum = 0.0, g_sum = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
      inter += p[i] * g[i];
      p_sum += p[i];
      g_sum += g[i];
    }
    dice_sum += (2.0 * inter + kDiceSmoothing) / (p_sum + g_sum + kDiceSmoothing);
  }
  return 1.0 - dice_sum / static_cast<double>(k);
}

double hard_dice_percent(const LabelMap& fixed, const LabelMap& warped) {
  require_label_grids(fixed, warped, "hard_dice_percent");
  const int k = fixed.num_classes();
  double dice_sum = 0.0;
  int scored = 0;
  for (int c = 1; c <= k; ++c) {
    std::size_t a = 0, b = 0, inter = 0;
    for (std::size_t i = 0; i < fixed.size(); ++i) {
      const bool in_a = fixed.data()[i] == c;
      const bool in_b = warped.data()[i] == c;
      a += in_a;
      b += in_b;
      inter += in_a && in_b;
    }
    if (a == 0 && b == 0) continue;  // class absent everywhere
    dice_sum += 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
    ++scored;
  }
  if (scored == 0) return 100.0;  // both maps empty: trivially identical
  return 100.0 * dice_sum / static_cast<double>(scored);
}

double warmup_loss(const Tensor& fixed, const Tensor& moving,
                   const DisplacementField& u, const LatentPolicy& policy,
                   const WarmupWeights& weights) {
  weights.validate();
  const Tensor warped = warp_volume(moving, u, WarpMode::Trilinear);
  return mse_similarity(fixed, warped) +
         weights.lambda_reg * diffusion_regularizer(u) +
         weights.beta_kl * kl_to_standard_normal(policy);
}

// --- graph builders -----------------------------------------------------------

ad::Var mse_node(ad::Tape& tape, ad::Var fixed, ad::Var warped) {
  return tape.mean(tape.square(tape.sub(fixed, warped)));
}

ad::Var diffusion_node(ad::Tape& tape, ad::Var field) {
  const Tensor& t = field.value();
  const double denom = static_cast<double>(t.size());
  ad::Var acc = tape.constant(Tensor::scalar(0.0));
  for (int axis = 1; axis <= 3; ++axis) {
    acc = tape.add(acc, tape.sum(tape.square(tape.axis_forward_diff(field, axis))));
  }
  return tape.mul_scalar(acc, 1.0 / denom);
}

ad::Var kl_node(ad::Tape& tape, ad::Var mu, ad::Var log_sigma) {
  const auto n = static_cast<double>(mu.value().size());
  ad::Var two_ls = tape.mul_scalar(log_sigma, 2.0);
  ad::Var terms = tape.sub(tape.add(tape.square(mu), tape.exp(two_ls)), two_ls);
  ad::Var summed = tape.add_scalar(tape.sum(terms), -n);
  return tape.mul_scalar(summed, 1.0 / (2.0 * n));
}

ad::Var soft_dice_node(ad::Tape& tape, const Tensor& fixed_onehot,
                       const Tensor& moving_onehot, ad::Var field) {
  require_same_shape(fixed_onehot, moving_onehot, "soft_dice_node");
  const int k = fixed_onehot.extent(0);
  const int d = fixed_onehot.extent(1), h = fixed_onehot.extent(2),
            w = fixed_onehot.extent(3);
  const std::size_t voxels = static_cast<std::size_t>(d) * h * w;
  ad::Var warped = tape.warp(tape.constant(moving_onehot), field);
  ad::Var dice_acc = tape.constant(Tensor::scalar(0.0));
  for (int c = 0; c < k; ++c) {
    Shape class_shape{1, d, h, w};
    ad::Var p = tape.reshape(tape.slice_channel(warped, c), class_shape);
    Tensor gt_c(class_shape);
    const double* gp = fixed_onehot.data() + static_cast<std::size_t>(c) * voxels;
    std::copy(gp, gp + voxels, gt_c.data());
    ad::Var g = tape.constant(std::move(gt_c));
    ad::Var inter = tape.sum(tape.mul(p, g));
    ad::Var numer = tape.add_scalar(tape.mul_scalar(inter, 2.0), kDiceSmoothing);
    ad::Var denom =
        tape.add_scalar(tape.add(tape.sum(p), tape.sum(g)), kDiceSmoothing);
    dice_acc = tape.add(dice_acc, tape.div(numer, denom));
  }
  ad::Var mean_dice = tape.mul_scalar(dice_acc, 1.0 / static_cast<double>(k));
  return tape.add_scalar(tape.neg(mean_dice), 1.0);
}

WarmTerms warmup_loss_node(ad::Tape& tape, const Tensor& fixed,
                           const Tensor& moving, ad::Var u, ad::Var mu,
                           ad::Var log_sigma, const WarmupWeights& weights) {
  weights.validate();
  WarmTerms t;
  ad::Var warped = tape.warp(tape.constant(moving), u);
  t.mse = mse_node(tape, tape.constant(fixed), warped);
  t.reg = diffusion_node(tape, u);
  t.kl = kl_node(tape, mu, log_sigma);
  t.total = tape.add(t.mse, tape.add(tape.mul_scalar(t.reg, weights.lambda_reg),
                                     tape.mul_scalar(t.kl, weights.beta_kl)));
  return t;
}

}  // namespace latreg
