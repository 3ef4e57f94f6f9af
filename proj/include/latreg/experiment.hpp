#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latreg/grpo.hpp"
#include "latreg/network.hpp"
#include "latreg/synthdata.hpp"

namespace latreg::exp {

inline constexpr const char* kVersion = "0.1.0";

struct SplitSizes {
  int train_unlabeled = 40;
  int train_labeled = 10;
  int val = 4;
  int test = 8;
};

struct AblateSpec {
  std::string mode = "grid";  // "grid" or "components"
  std::vector<int> trajectories = {2, 6};
  std::vector<int> steps = {1, 3};
};

/// One JSON document drives every command. Every field has a default, so an
/// empty config runs the reference experiment.
struct ExperimentConfig {
  std::uint64_t seed = 20240601;
  std::string out_dir = "runs/ref";
  std::string data_dir;  // empty: <out_dir>/dataset
  synth::SceneSpec scene;
  BackboneConfig backbone;
  SplitSizes splits;
  grpo::WarmupSettings warmup;
  grpo::GrpoConfig grpo;
  AblateSpec ablate;

  std::filesystem::path dataset_dir() const;
  void validate() const;
};

ExperimentConfig default_config();
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);

// --- dataset ------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string split;
  std::uint64_t seed = 0;
  double initial_dice = 0.0;  // hard dice of the untouched pair
};

struct GenerateResult {
  std::filesystem::path manifest_path;
  std::vector<ManifestEntry> entries;
};

GenerateResult cmd_generate(const ExperimentConfig& cfg, bool force);
grpo::Dataset load_dataset(const ExperimentConfig& cfg);

// --- stages -------------------------------------------------------------------

struct StageResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_csv;
  std::vector<grpo::EpochMetrics> metrics;
};

StageResult cmd_warmup(const ExperimentConfig& cfg);
// `no_warmup` starts from a random initialization (the warm-up comparison
// path); `checkpoint` overrides the default warm-up checkpoint location.
StageResult cmd_grpo(const ExperimentConfig& cfg, bool no_warmup,
                     const std::optional<std::filesystem::path>& checkpoint);

struct EvalSummary {
  double dice_mean = 0.0;
  double dice_std = 0.0;
  double njd_mean = 0.0;
  double njd_std = 0.0;
  int steps = 1;
  std::vector<std::string> pair_ids;
  std::vector<double> pair_dice;
  std::vector<double> pair_njd;
};

EvalSummary evaluate_checkpoint(const ExperimentConfig& cfg,
                                const std::filesystem::path& checkpoint,
                                int steps,
                                const std::vector<grpo::RegistrationPair>& pairs);
EvalSummary cmd_eval(const ExperimentConfig& cfg,
                     const std::optional<std::filesystem::path>& checkpoint);
void cmd_infer(const ExperimentConfig& cfg,
               const std::optional<std::filesystem::path>& checkpoint);

// Supervised fine-tune without the policy branch: the "+dice" and
// "+multi-step" ablation rows.
std::vector<grpo::EpochMetrics> run_supervised_finetune(
    RegistrationNet& net, const grpo::Dataset& data, const grpo::GrpoConfig& cfg,
    const WarmupWeights& warm_weights, std::ostream* progress = nullptr);

struct AblateRow {
  std::string label;
  int trajectories = 0;
  int steps = 0;
  std::string status;  // "ok" or "OOM"
  double dice_mean = 0.0, dice_std = 0.0;
  double njd_mean = 0.0, njd_std = 0.0;
};

std::vector<AblateRow> cmd_ablate(const ExperimentConfig& cfg);
void cmd_probe_ldvn(const ExperimentConfig& cfg);

// --- cli ------------------------------------------------------------------------

// Full command surface; returns the process exit code (0 ok, 2 config error,
// 3 data error, 4 numeric abort).
int cli_main(const std::vector<std::string>& args);

// Helpers shared with tests.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string metrics_to_csv(const std::vector<grpo::EpochMetrics>& rows);

}  // namespace latreg::exp
