#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "elmur/config.hpp"
#include "elmur/model.hpp"
#include "elmur/trajectory.hpp"

namespace elmur {

// Maps a group of episodes to predicted actions, one vector per episode.
using Policy = std::function<std::vector<std::vector<int>>(const std::vector<Trajectory>&)>;

// Greedy argmax over the model's logits. Each episode runs with memory that
// persists across all of its segments, initialized from its own seed.
template <typename T>
Policy model_policy(const ModelParams<T>& params, const ModelConfig& cfg);

// Replays the recorded oracle actions.
Policy oracle_policy();

// Argmax per token over [tokens, actions] logits; ties go to the lower action.
template <typename T>
std::vector<int> greedy_actions(std::span<const T> logits, int tokens, int actions);

// Sets obs_dim / action_dim to match the task.
void fit_model_to_task(RunConfig& cfg);
// `length` is the corridor (tmaze), sequence length (repeat_first) or segment length (recall).
Trajectory task_episode(const TaskConfig& task, int length, std::uint64_t seed);
bool task_success(const TaskConfig& task, const Trajectory& t, std::span<const int> predicted);
// Training set: lengths drawn uniformly from task.train_lengths.
std::vector<Trajectory> task_dataset(const TaskConfig& task, std::uint64_t seed);

struct SuccessCount {
  int successes = 0;
  int episodes = 0;
  double rate() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
};

// Episodes of `task` at one length, seeded from
// (seed, task, length, index) and evaluated `batch` at a time on up to
// `workers` threads.
SuccessCount evaluate_length(const Policy& policy, const TaskConfig& task, int length, int episodes, std::uint64_t seed,
                             int batch = 50, int workers = 1);

struct MeanSem {
  double mean = 0;
  double sem = 0;
};

// Sample std / sqrt(n); sem = 0 for a single value. Throws on empty input.
MeanSem sem(const std::vector<double>& values);

struct LengthResult {
  int length = 0;
  std::vector<double> run_success;  // one rate per run
  int episodes_per_run = 0;
  MeanSem stats;
};

struct EvalReport {
  std::vector<LengthResult> lengths;
  MeanSem grand;  // over per-run means across lengths
  std::string fingerprint;
};

// One policy per run; every run sees the same episode seeds.
EvalReport rollout_eval(const std::vector<Policy>& runs, const TaskConfig& task, const std::vector<int>& lengths,
                        int episodes, std::uint64_t seed, int batch = 50, int workers = 1);

void write_sweep_csv(const std::string& path, const EvalReport& report);
EvalReport extrapolation_sweep(const std::vector<Policy>& runs, const TaskConfig& task, const std::vector<int>& grid,
                               int episodes, std::uint64_t seed, const std::string& csv_path, int batch = 50,
                               int workers = 1);

// Trains a float model for `cfg`, deriving training data from the task
// section. Used by the matrix and ablation runners.
struct TrainedRun {
  ModelParams<float> params;
  ModelConfig model;
  double final_loss = 0;
  double seconds = 0;
};
TrainedRun train_run(const RunConfig& cfg, const std::function<void(const std::string&)>& log = {});

struct MatrixCell {
  int train_length = 0;
  int val_length = 0;
  MeanSem stats;
  std::vector<double> run_success;
};

// Trains `runs` models per training length N on corridors 1..N (the longest
// episode splits into three equal segments, so L = ceil((N + 1) / 3)) and
// evaluates every validation length.
std::vector<MatrixCell> generalization_matrix(const RunConfig& base, const std::vector<int>& train_lengths,
                                              const std::vector<int>& val_lengths, int runs,
                                              const std::string& csv_path,
                                              const std::function<void(const std::string&)>& log = {});

// Variant names: baseline, shared_memory, no_rel_bias, no_lru,
// no_rel_bias_no_lru, moe_to_mlp, lambda=<v>, sigma=<v>, slots=<M>,
// segments=<L>x<S>. Throws std::invalid_argument on anything else.
RunConfig apply_variant(const RunConfig& base, const std::string& variant);

struct AblationRow {
  std::string variant;
  MeanSem stats;
  std::vector<double> run_success;
};

// Trains and evaluates each variant `runs` times on the base task at its
// first training length.
std::vector<AblationRow> ablation_run(const RunConfig& base, const std::vector<std::string>& variants, int runs,
                                      const std::string& csv_path,
                                      const std::function<void(const std::string&)>& log = {});

// FNV-1a over every parameter value; used to show evaluation leaves weights untouched.
template <typename T>
std::string parameter_fingerprint(const ModelParams<T>& params);

// JSON summary next to a command's outputs.
void write_run_summary(const std::string& path, const std::string& command, const RunConfig& cfg,
                       const std::vector<std::string>& artifacts, double wall_seconds,
                       const std::string& extra_json = "{}");

}  // namespace elmur
