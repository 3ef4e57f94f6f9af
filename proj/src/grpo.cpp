#include "latreg/grpo.hpp"

#include <algorithm>
#include <cmath>

#include "latreg/errors.hpp"
#include "latreg/optimizer.hpp"
#include "latreg/rng.hpp"

namespace latreg::grpo {

void RewardWeights::validate() const {
  if (!(w_dice > 0.0)) throw ConfigError("w_dice must be > 0");
  if (!(w_njd < 0.0)) throw ConfigError("w_njd must be < 0");
}

double TauSchedule::at_epoch(int epoch_index) const {
  return std::max(floor, initial * std::pow(decay, static_cast<double>(epoch_index)));
}

void GrpoConfig::validate() const {
  if (trajectories < 2) {
    throw ConfigError("trajectories must be >= 2; group statistics need J >= 2");
  }
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (!(memory_budget_mb > 0.0)) throw ConfigError("memory budget must be > 0");
  if (!(tau.initial > 0.0) || !(tau.floor > 0.0) || !(tau.decay > 0.0) ||
      tau.decay > 1.0) {
    throw ConfigError("tau schedule needs initial > 0, floor > 0, decay in (0, 1]");
  }
  reward_weights.validate();
}

void WarmupSettings::validate() const {
  if (epochs < 1) throw ConfigError("warmup epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("warmup learning rate must be > 0");
  weights.validate();
}

double reward(const LabelMap& fixed_labels, const LabelMap& moving_labels,
              const DisplacementField& phi_prev,
              const DisplacementField& phi_cand, const RewardWeights& weights) {
  weights.validate();
  const double dice_cand =
      hard_dice_percent(fixed_labels, warp_labels(moving_labels, phi_cand)) / 100.0;
  const double dice_prev =
      hard_dice_percent(fixed_labels, warp_labels(moving_labels, phi_prev)) / 100.0;
  const double njd_frac = njd_percent(phi_cand) / 100.0;
  return weights.w_dice * (dice_cand - dice_prev) + weights.w_njd * njd_frac;
}

std::vector<double> advantages(const std::vector<double>& rewards,
                               double epsilon) {
  const std::size_t j = rewards.size();
  if (j < 2) {
    throw ConfigError("advantages need at least 2 rewards, got " +
                      std::to_string(j));
  }
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(j);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(j);  // population form keeps J = 2 well-defined
  const double denom = std::sqrt(var) + epsilon;
  std::vector<double> out(j);
  for (std::size_t i = 0; i < j; ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

double ldvn_scale(std::int64_t n) {
  if (n < 1) throw ConfigError("ldvn_scale: N must be >= 1");
  return std::sqrt(static_cast<double>(n));
}

std::vector<double> relative_log_likelihoods(const LatentPolicy& policy,
                                             const std::vector<Tensor>& zs,
                                             double s) {
  std::vector<double> lp(zs.size());
  for (std::size_t i = 0; i < zs.size(); ++i) lp[i] = log_pi(policy, zs[i], s);
  double mean = 0.0;
  for (double v : lp) mean += v;
  mean /= static_cast<double>(lp.size());
  for (double& v : lp) v -= mean;
  return lp;
}

double policy_loss(const std::vector<double>& advantages,
                   const std::vector<double>& rel_log_liks) {
  if (advantages.size() != rel_log_liks.size()) {
    throw ConfigError("policy_loss: group size mismatch, " +
                      std::to_string(advantages.size()) + " vs " +
                      std::to_string(rel_log_liks.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    acc += advantages[i] * rel_log_liks[i];
  }
  return -acc / static_cast<double>(advantages.size());
}

ad::Var policy_loss_node(ad::Tape& tape, const std::vector<double>& advantages,
                         const std::vector<ad::Var>& log_pis) {
  if (advantages.size() != log_pis.size()) {
    throw ConfigError("policy_loss_node: group size mismatch");
  }
  const auto j = static_cast<double>(log_pis.size());
  ad::Var mean = tape.constant(Tensor::scalar(0.0));
  for (ad::Var lp : log_pis) mean = tape.add(mean, lp);
  mean = tape.mul_scalar(mean, 1.0 / j);
  ad::Var acc = tape.constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < log_pis.size(); ++i) {
    ad::Var centered = tape.sub(log_pis[i], mean);
    acc = tape.add(acc, tape.mul_scalar(centered, advantages[i]));
  }
  return tape.mul_scalar(acc, -1.0 / j);
}

int greedy_select(const std::vector<double>& rewards) {
  if (rewards.empty()) throw ConfigError("greedy_select: empty group");
  int best = 0;
  for (int i = 1; i < static_cast<int>(rewards.size()); ++i) {
    if (rewards[static_cast<std::size_t>(i)] >
        rewards[static_cast<std::size_t>(best)]) {
      best = i;
    }
  }
  return best;
}

// --- per-step loss graph -------------------------------------------------------

StepBuild build_step_loss(ad::Tape& tape, const RegistrationNet& net,
                          const RegistrationPair& pair,
                          const Tensor& state_moving,
                          const DisplacementField& phi_prev,
                          const GrpoConfig& cfg,
                          const WarmupWeights& warm_weights, double tau,
                          const std::vector<Tensor>& eps,
                          const StepFrozen* frozen) {
  const int j_count = static_cast<int>(eps.size());
  if (j_count < 2) throw ConfigError("build_step_loss: need at least 2 trajectories");
  if (!pair.has_labels()) {
    throw ConfigError("build_step_loss: pair '" + pair.id + "' has no labels");
  }
  if (!(tau > 0.0)) throw ConfigError("build_step_loss: tau must be > 0");

  StepBuild out;
  EncodeResult enc = net.encode(tape, state_moving, pair.fixed);
  ad::Var sigma = tape.exp(enc.log_sigma);
  ad::Var prev_const = tape.constant(phi_prev.tensor());

  const Tensor fixed_onehot = pair.fixed_labels.one_hot();
  const Tensor moving_onehot = pair.moving_labels.one_hot();

  std::vector<ad::Var> candidate_vars;
  candidate_vars.reserve(static_cast<std::size_t>(j_count));
  ad::Var dice_acc = tape.constant(Tensor::scalar(0.0));
  for (int j = 0; j < j_count; ++j) {
    // Reparameterized latent: gradients reach the heads through the decoder.
    ad::Var noise =
        tape.mul_scalar(tape.mul(sigma, tape.constant(eps[static_cast<std::size_t>(j)])), tau);
    ad::Var z = tape.add(enc.mu, noise);
    out.zs.push_back(z.value());
    ad::Var step_field = net.decode(tape, enc.skips, z);
    // Composition on the tape: total(x) = step(x) + prev(x + step(x)).
    ad::Var cand = tape.add(step_field, tape.warp(prev_const, step_field));
    candidate_vars.push_back(cand);
    out.candidate_fields.emplace_back(cand.value());
    dice_acc =
        tape.add(dice_acc, soft_dice_node(tape, fixed_onehot, moving_onehot, cand));
  }
  out.dice_mean = tape.mul_scalar(dice_acc, 1.0 / static_cast<double>(j_count));

  if (frozen != nullptr) {
    out.advantages = frozen->advantages;
  } else {
    out.rewards.reserve(static_cast<std::size_t>(j_count));
    const double dice_prev =
        hard_dice_percent(pair.fixed_labels,
                          warp_labels(pair.moving_labels, phi_prev)) /
        100.0;
    for (int j = 0; j < j_count; ++j) {
      const DisplacementField& cand = out.candidate_fields[static_cast<std::size_t>(j)];
      const double dice_cand =
          hard_dice_percent(pair.fixed_labels, warp_labels(pair.moving_labels, cand)) /
          100.0;
      const double njd_frac = njd_percent(cand) / 100.0;
      out.dice_fracs.push_back(dice_cand);
      out.dice_gains.push_back(dice_cand - dice_prev);
      out.njd_fracs.push_back(njd_frac);
      out.rewards.push_back(cfg.reward_weights.w_dice * (dice_cand - dice_prev) +
                            cfg.reward_weights.w_njd * njd_frac);
    }
    out.advantages = advantages(out.rewards, cfg.epsilon);
  }

  const double s =
      cfg.ldvn ? ldvn_scale(static_cast<std::int64_t>(enc.mu.value().size())) : 1.0;
  std::vector<ad::Var> log_pis;
  log_pis.reserve(static_cast<std::size_t>(j_count));
  for (int j = 0; j < j_count; ++j) {
    const Tensor& z_det = frozen != nullptr
                              ? frozen->z_detached[static_cast<std::size_t>(j)]
                              : out.zs[static_cast<std::size_t>(j)];
    log_pis.push_back(log_pi_node(tape, enc.mu, enc.log_sigma, z_det, tau, s));
  }
  out.policy = policy_loss_node(tape, out.advantages, log_pis);

  {  // group bookkeeping for logs and invariant tests
    double lp_mean = 0.0;
    out.rel_log_pis.resize(static_cast<std::size_t>(j_count));
    for (int j = 0; j < j_count; ++j) {
      out.rel_log_pis[static_cast<std::size_t>(j)] =
          log_pis[static_cast<std::size_t>(j)].value().item();
      lp_mean += out.rel_log_pis[static_cast<std::size_t>(j)];
    }
    lp_mean /= static_cast<double>(j_count);
    for (double& v : out.rel_log_pis) v -= lp_mean;
    out.stats.log_pi_mean = lp_mean;
    if (!out.rewards.empty()) {
      double rm = 0.0;
      for (double r : out.rewards) rm += r;
      rm /= static_cast<double>(j_count);
      double var = 0.0;
      for (double r : out.rewards) var += (r - rm) * (r - rm);
      out.stats.reward_mean = rm;
      out.stats.reward_std = std::sqrt(var / static_cast<double>(j_count));
    }
  }

  // Deterministic warm branch on the current state (tau = 0 reading).
  ad::Var u0 = net.decode(tape, enc.skips, enc.mu);
  WarmTerms warm = warmup_loss_node(tape, pair.fixed, state_moving, u0, enc.mu,
                                    enc.log_sigma, warm_weights);
  out.warm_total = warm.total;
  out.warm_mse = warm.mse;
  out.warm_reg = warm.reg;
  out.warm_kl = warm.kl;

  out.total = tape.add(
      out.policy, tape.add(tape.mul_scalar(out.warm_total, cfg.lambda_warm),
                           tape.mul_scalar(out.dice_mean, cfg.lambda_dice)));
  return out;
}

// --- trainers --------------------------------------------------------------------

namespace {

struct ValScore {
  double dice = 0.0;
  double njd = 0.0;
};

ValScore validate_on(const RegistrationNet& net,
                     const std::vector<RegistrationPair>& pairs, int steps) {
  ValScore score;
  if (pairs.empty()) return score;
  for (const RegistrationPair& p : pairs) {
    InferenceResult r = infer_multistep(net, p, steps);
    if (!r.steps.empty()) {
      score.dice += r.steps.back().dice_percent;
      score.njd += r.steps.back().njd_percent;
    }
  }
  score.dice /= static_cast<double>(pairs.size());
  score.njd /= static_cast<double>(pairs.size());
  return score;
}

void ensure_finite(double loss, const char* stage, const std::string& pair_id,
                   int epoch, int step, double grad_norm,
                   const AbortDumpFn& on_abort) {
  if (std::isfinite(loss)) return;
  AbortInfo info;
  info.stage = stage;
  info.pair_id = pair_id;
  info.epoch = epoch;
  info.step = step;
  info.loss = loss;
  info.grad_norm = grad_norm;
  if (on_abort) on_abort(info);
  throw NumericError(std::string(stage) + ": non-finite loss at epoch " +
                     std::to_string(epoch) + ", pair '" + pair_id + "', step " +
                     std::to_string(step));
}

}  // namespace

std::vector<EpochMetrics> run_warmup(RegistrationNet& net, const Dataset& data,
                                     const WarmupSettings& settings,
                                     std::ostream* progress,
                                     const AbortDumpFn& on_abort,
                                     const EpochCallback& on_epoch) {
  settings.validate();
  if (data.train_unlabeled.empty()) {
    throw ConfigError("run_warmup: no unlabeled training pairs");
  }
  AdamOptimizer opt(settings.learning_rate);
  std::vector<EpochMetrics> metrics;
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    EpochMetrics row;
    row.epoch = epoch + 1;
    row.tau = 0.0;
    for (const RegistrationPair& pair : data.train_unlabeled) {
      ad::Tape tape;
      EncodeResult enc = net.encode(tape, pair.moving, pair.fixed);
      ad::Var u0 = net.decode(tape, enc.skips, enc.mu);
      WarmTerms terms = warmup_loss_node(tape, pair.fixed, pair.moving, u0,
                                         enc.mu, enc.log_sigma, settings.weights);
      const double loss = terms.total.value().item();
      ensure_finite(loss, "warmup", pair.id, row.epoch, 1, opt.last_grad_norm(),
                    on_abort);
      row.total += loss;
      row.mse += terms.mse.value().item();
      row.reg += terms.reg.value().item();
      row.kl += terms.kl.value().item();
      ad::GradientMap grads = tape.backward(terms.total);
      opt.step(net.params(), grads);
    }
    const auto n = static_cast<double>(data.train_unlabeled.size());
    row.total /= n;
    row.mse /= n;
    row.reg /= n;
    row.kl /= n;
    const ValScore val = validate_on(net, data.val, 1);
    row.val_dice = val.dice;
    row.val_njd = val.njd;
    metrics.push_back(row);
    if (on_epoch) on_epoch(row);
    if (progress) {
      *progress << "warmup epoch " << row.epoch << "/" << settings.epochs
                << " loss " << row.total << " val_dice " << row.val_dice << "\n";
    }
  }
  return metrics;
}

std::vector<EpochMetrics> run_grpo(RegistrationNet& net, const Dataset& data,
                                   const GrpoConfig& cfg,
                                   const WarmupWeights& warm_weights,
                                   std::uint64_t seed,
                                   const TrajectoryLogFn& log_fn,
                                   std::ostream* progress,
                                   const AbortDumpFn& on_abort,
                                   const EpochCallback& on_epoch) {
  cfg.validate();
  warm_weights.validate();
  if (data.train_labeled.empty()) {
    throw ConfigError("run_grpo: no labeled training pairs");
  }
  const Shape vol_shape = data.train_labeled.front().moving.shape();
  const double estimated =
      estimate_step_memory_mb(net.config(), vol_shape, cfg.trajectories);
  if (estimated > cfg.memory_budget_mb) {
    throw ConfigError("memory pre-flight: step needs about " +
                      std::to_string(estimated) + " MB, budget is " +
                      std::to_string(cfg.memory_budget_mb) + " MB (J=" +
                      std::to_string(cfg.trajectories) + ")");
  }

  // Latent extents for drawing noise without building a graph first.
  const int df = net.config().downsample_factor();
  const int cl = net.config().channels.back();
  const Shape latent_shape{cl, vol_shape[0] / df, vol_shape[1] / df,
                           vol_shape[2] / df};

  AdamOptimizer opt(cfg.learning_rate);  // fresh moments at the stage boundary
  std::vector<EpochMetrics> metrics;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double tau = cfg.tau.at_epoch(epoch);
    EpochMetrics row;
    row.epoch = epoch + 1;
    row.tau = tau;
    int updates = 0;
    for (std::size_t pair_idx = 0; pair_idx < data.train_labeled.size();
         ++pair_idx) {
      const RegistrationPair& pair = data.train_labeled[pair_idx];
      DisplacementField phi = DisplacementField::zeros(
          pair.moving.extent(0), pair.moving.extent(1), pair.moving.extent(2));
      Tensor state_moving = pair.moving;
      for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<Tensor> eps;
        std::vector<std::uint64_t> traj_seeds;
        eps.reserve(static_cast<std::size_t>(cfg.trajectories));
        for (int j = 0; j < cfg.trajectories; ++j) {
          const std::uint64_t ts =
              mix_seed(seed, static_cast<std::uint64_t>(epoch),
                       pair_idx * 64 + static_cast<std::uint64_t>(step),
                       static_cast<std::uint64_t>(j));
          traj_seeds.push_back(ts);
          Rng rng(ts);
          Tensor e(latent_shape);
          for (std::size_t i = 0; i < e.size(); ++i) e[i] = rng.normal();
          eps.push_back(std::move(e));
        }

        ad::Tape tape;
        StepBuild build = build_step_loss(tape, net, pair, state_moving, phi,
                                          cfg, warm_weights, tau, eps);
        const double loss = build.total.value().item();
        ensure_finite(loss, "grpo", pair.id, row.epoch, step,
                      opt.last_grad_norm(), on_abort);
        row.total += loss;
        row.policy += build.policy.value().item();
        row.dice_loss += build.dice_mean.value().item();
        row.mse += build.warm_mse.value().item();
        row.reg += build.warm_reg.value().item();
        row.kl += build.warm_kl.value().item();
        ++updates;

        ad::GradientMap grads = tape.backward(build.total);
        opt.step(net.params(), grads);

        // Greedy state update with the pre-update fields.
        const int best = greedy_select(build.rewards);
        phi = build.candidate_fields[static_cast<std::size_t>(best)];
        state_moving = warp_volume(pair.moving, phi, WarpMode::Trilinear);

        if (log_fn) {
          for (int j = 0; j < cfg.trajectories; ++j) {
            const auto uj = static_cast<std::size_t>(j);
            TrajectoryRecord rec;
            rec.seed = traj_seeds[uj];
            rec.reward = build.rewards[uj];
            rec.advantage = build.advantages[uj];
            rec.rel_log_pi = build.rel_log_pis[uj];
            rec.dice_frac = build.dice_fracs[uj];
            rec.dice_gain = build.dice_gains[uj];
            rec.njd_frac = build.njd_fracs[uj];
            log_fn(pair.id, row.epoch, step, j, rec);
          }
        }
      }
    }
    const auto n = static_cast<double>(std::max(updates, 1));
    row.total /= n;
    row.policy /= n;
    row.dice_loss /= n;
    row.mse /= n;
    row.reg /= n;
    row.kl /= n;
    const ValScore val = validate_on(net, data.val, cfg.steps);
    row.val_dice = val.dice;
    row.val_njd = val.njd;
    metrics.push_back(row);
    if (on_epoch) on_epoch(row);
    if (progress) {
      *progress << "grpo epoch " << row.epoch << "/" << cfg.epochs << " tau "
                << tau << " loss " << row.total << " val_dice " << row.val_dice
                << " val_njd " << row.val_njd << "\n";
    }
  }
  return metrics;
}

InferenceResult infer_multistep(const RegistrationNet& net,
                                const RegistrationPair& pair, int steps) {
  if (steps < 1) throw ConfigError("infer_multistep: steps must be >= 1");
  InferenceResult out;
  out.field = DisplacementField::zeros(pair.moving.extent(0),
                                       pair.moving.extent(1),
                                       pair.moving.extent(2));
  out.warped = pair.moving;
  for (int t = 1; t <= steps; ++t) {
    const DisplacementField step_field = net.forward_field(out.warped, pair.fixed);
    out.field = compose(out.field, step_field);
    out.warped = warp_volume(pair.moving, out.field, WarpMode::Trilinear);
    if (pair.has_labels()) {
      StepMetrics m;
      m.step = t;
      m.dice_percent = hard_dice_percent(
          pair.fixed_labels, warp_labels(pair.moving_labels, out.field));
      m.njd_percent = njd_percent(out.field);
      out.steps.push_back(m);
    }
  }
  return out;
}

double estimate_step_memory_mb(const BackboneConfig& cfg,
                               const Shape& volume_extents, int trajectories) {
  const double voxels = static_cast<double>(volume_extents[0]) *
                        volume_extents[1] * volume_extents[2];
  const auto& ch = cfg.channels;
  const int levels = cfg.levels;
  double encode_vals = 2.0 * voxels;  // input pair
  double scale = 1.0;
  for (int l = 0; l < levels; ++l) {
    encode_vals += 2.0 * ch[static_cast<std::size_t>(l)] * voxels / scale;
    scale *= 8.0;
  }
  const double latent = ch.back() * voxels / (scale / 8.0);
  encode_vals += 6.0 * latent;  // two heads with activations

  double decode_vals = 0.0;
  scale = scale / 8.0;
  double carried = ch[static_cast<std::size_t>(levels - 2)];
  decode_vals += 2.0 * carried * voxels / scale;
  for (int l = levels - 1; l >= 1; --l) {
    scale /= 8.0;
    const double skip = ch[static_cast<std::size_t>(l - 1)];
    decode_vals += (3.0 * (carried + skip) + 2.0 * skip) * voxels / scale;
    carried = skip;
  }
  decode_vals += 2.0 * 3.0 * voxels;          // flow head
  decode_vals += 4.0 * 3.0 * voxels;          // composition and warps
  decode_vals += 3.0 * latent;                // latent noise nodes

  // Values plus an equal share of gradients, with slack for loss bookkeeping.
  const double total_vals =
      encode_vals + (static_cast<double>(trajectories) + 1.0) * decode_vals;
  const double bytes = total_vals * 2.0 * sizeof(double) * 1.25;
  return bytes / (1024.0 * 1024.0);
}

}  // namespace latreg::grpo
