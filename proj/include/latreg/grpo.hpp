#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "latreg/autodiff.hpp"
#include "latreg/fields.hpp"
#include "latreg/labelmap.hpp"
#include "latreg/network.hpp"
#include "latreg/objectives.hpp"

namespace latreg::grpo {

struct RewardWeights {
  double w_dice = 50.0;   // must stay > 0
  double w_njd = -100.0;  // must stay < 0
  void validate() const;
};

struct TauSchedule {
  double initial = 1.0;
  double decay = 0.95;  // multiplicative, per epoch
  double floor = 0.1;
  double at_epoch(int epoch_index) const;  // 0-based
};

struct GrpoConfig {
  int trajectories = 6;  // J
  int steps = 3;         // T
  int epochs = 30;
  double learning_rate = 1e-4;
  double lambda_warm = 0.8;
  double lambda_dice = 5.0;
  RewardWeights reward_weights;
  TauSchedule tau;
  double epsilon = 1e-8;  // advantage denominator guard
  bool ldvn = true;       // scale log-likelihoods by sqrt(N); off means s = 1
  double memory_budget_mb = 512.0;
  void validate() const;
};

// Dice-increment plus folding-penalty reward, both terms in fractional units
// (0..1) before weighting. Labels are warped nearest-neighbor from the
// original moving map by each total field.
double reward(const LabelMap& fixed_labels, const LabelMap& moving_labels,
              const DisplacementField& phi_prev,
              const DisplacementField& phi_cand, const RewardWeights& weights);

// Group-normalized advantages with population standard deviation.
// Requires at least two rewards.
std::vector<double> advantages(const std::vector<double>& rewards,
                               double epsilon = 1e-8);

// Log-likelihood scale for an N-dimensional latent: sqrt(N).
double ldvn_scale(std::int64_t n);

// Per-trajectory log-likelihoods under the shared policy, centered on the
// group mean.
std::vector<double> relative_log_likelihoods(const LatentPolicy& policy,
                                             const std::vector<Tensor>& zs,
                                             double s);

double policy_loss(const std::vector<double>& advantages,
                   const std::vector<double>& rel_log_liks);
ad::Var policy_loss_node(ad::Tape& tape, const std::vector<double>& advantages,
                         const std::vector<ad::Var>& log_pis);

// Highest reward wins; ties break to the smallest index.
int greedy_select(const std::vector<double>& rewards);

// --- datasets -----------------------------------------------------------------

struct RegistrationPair {
  std::string id;
  Tensor moving;
  Tensor fixed;
  LabelMap moving_labels;
  LabelMap fixed_labels;
  DisplacementField true_field;  // optional diagnostics
  bool has_labels() const { return moving_labels.size() > 0; }
};

struct Dataset {
  std::vector<RegistrationPair> train_unlabeled;
  std::vector<RegistrationPair> train_labeled;
  std::vector<RegistrationPair> val;
  std::vector<RegistrationPair> test;
};

// --- one optimizer step -----------------------------------------------------

struct TrajectoryRecord {
  std::uint64_t seed = 0;
  double reward = 0.0;
  double advantage = 0.0;
  double rel_log_pi = 0.0;
  double dice_frac = 0.0;   // Dice of the candidate total field
  double dice_gain = 0.0;   // increment over the previous field
  double njd_frac = 0.0;
};

struct GroupStats {
  double reward_mean = 0.0;
  double reward_std = 0.0;  // population
  double log_pi_mean = 0.0;
};

// Quantities held fixed while differentiating: the sampled latents feeding
// the log-likelihoods and the reward-derived advantages.
struct StepFrozen {
  std::vector<Tensor> z_detached;
  std::vector<double> advantages;
};

struct StepBuild {
  ad::Var total;
  ad::Var policy;
  ad::Var dice_mean;
  ad::Var warm_total, warm_mse, warm_reg, warm_kl;
  std::vector<DisplacementField> candidate_fields;
  std::vector<Tensor> zs;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> rel_log_pis;
  std::vector<double> dice_fracs, dice_gains, njd_fracs;
  GroupStats stats;
};

// Builds the full per-step loss graph: J reparameterized decodes for the
// soft-Dice branch, detached-latent log-likelihoods for the policy branch,
// and the deterministic (tau = 0) warm branch on the current state. Passing
// `frozen` replays the branch structure with fixed latents/advantages, which
// is what finite differences of the step loss must see.
StepBuild build_step_loss(ad::Tape& tape, const RegistrationNet& net,
                          const RegistrationPair& pair,
                          const Tensor& state_moving,
                          const DisplacementField& phi_prev,
                          const GrpoConfig& cfg,
                          const WarmupWeights& warm_weights, double tau,
                          const std::vector<Tensor>& eps,
                          const StepFrozen* frozen = nullptr);

// --- trainers -----------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;  // 1-based in emitted files
  double total = 0.0, mse = 0.0, reg = 0.0, kl = 0.0;
  double policy = 0.0, dice_loss = 0.0;
  double val_dice = 0.0, val_njd = 0.0;
  double tau = 0.0;
};

struct WarmupSettings {
  int epochs = 60;
  double learning_rate = 1e-3;
  WarmupWeights weights;
  void validate() const;
};

struct AbortInfo {
  std::string stage;
  std::string pair_id;
  int epoch = 0, step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};
using AbortDumpFn = std::function<void(const AbortInfo&)>;

using TrajectoryLogFn = std::function<void(
    const std::string& pair_id, int epoch, int step, int traj,
    const TrajectoryRecord& record)>;

// Invoked after every finished epoch with the row just produced.
using EpochCallback = std::function<void(const EpochMetrics&)>;

std::vector<EpochMetrics> run_warmup(RegistrationNet& net, const Dataset& data,
                                     const WarmupSettings& settings,
                                     std::ostream* progress = nullptr,
                                     const AbortDumpFn& on_abort = nullptr,
                                     const EpochCallback& on_epoch = nullptr);

std::vector<EpochMetrics> run_grpo(RegistrationNet& net, const Dataset& data,
                                   const GrpoConfig& cfg,
                                   const WarmupWeights& warm_weights,
                                   std::uint64_t seed,
                                   const TrajectoryLogFn& log_fn = nullptr,
                                   std::ostream* progress = nullptr,
                                   const AbortDumpFn& on_abort = nullptr,
                                   const EpochCallback& on_epoch = nullptr);

// --- inference -----------------------------------------------------------------

struct StepMetrics {
  int step = 0;
  double dice_percent = 0.0;
  double njd_percent = 0.0;
};

struct InferenceResult {
  DisplacementField field;
  Tensor warped;
  std::vector<StepMetrics> steps;  // filled when the pair carries labels
};

// Deterministic tau = 0 multi-step refinement; the composed field always
// applies to the original moving image.
InferenceResult infer_multistep(const RegistrationNet& net,
                                const RegistrationPair& pair, int steps);

// Rough peak-memory estimate for one optimizer step (tape values plus
// gradients), used by the pre-flight refusal in run_grpo.
double estimate_step_memory_mb(const BackboneConfig& cfg,
                               const Shape& volume_extents, int trajectories);

}  // namespace latreg::grpo
