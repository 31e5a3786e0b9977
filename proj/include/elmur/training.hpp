#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "elmur/config.hpp"
#include "elmur/model.hpp"

namespace elmur {

// Mean over valid tokens. Discrete: label-smoothed cross-entropy with target
// (1 - s) * onehot + s / n. Continuous: squared error averaged over valid
// tokens and action dims. Throws when every token is padding.
template <typename T>
Tensor<T> bc_loss(const Tensor<T>& outputs, const Segment<T>& segment, ActionSpace space, double label_smoothing);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
};

template <typename T>
AdamState<T> adam_init(const ParamList<T>& params);

// AdamW with bias correction. Reads each parameter's accumulated gradient
// (missing gradient counts as zero). Returns false and leaves everything
// untouched when any gradient is non-finite.
template <typename T>
bool adam_step(ParamList<T>& params, AdamState<T>& state, const TrainConfig& cfg, double lr);

// Linear warmup to lr, then cosine decay to lr * end_factor at total_steps
// (or constant lr without cosine).
double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t total_steps);

// Global-norm clipping in place. Returns the norm before clipping.
template <typename T>
double clip_gradients(ParamList<T>& params, double max_norm);

struct TrainLogRow {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
  double wall_time = 0;
  bool skipped = false;
};

inline constexpr int kCheckpointVersion = 1;

template <typename T>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<Trajectory> data);

  // One optimizer step on the next batch.
  TrainLogRow step();
  bool done() const { return step_ >= total_steps_; }
  // Runs until done or `max_steps` more steps; appends a CSV row per step if a log path is set.
  std::vector<TrainLogRow> run(std::int64_t max_steps = -1, const std::function<void(const TrainLogRow&)>& on_step = {});

  void save(const std::string& path) const;
  void load(const std::string& path);

  void set_log_path(const std::string& path);
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }
  const RunConfig& config() const { return cfg_; }
  std::int64_t steps_taken() const { return step_; }
  std::int64_t total_steps() const { return total_steps_; }

 private:
  std::vector<std::size_t> epoch_order(int epoch) const;

  RunConfig cfg_;
  std::vector<Trajectory> data_;
  ModelParams<T> params_;
  ParamList<T> named_;
  AdamState<T> adam_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::int64_t total_steps_ = 0;
  int batches_per_epoch_ = 0;
  std::string log_path_;
  double wall_offset_ = 0;
};

// Reads only the model part of a checkpoint, for evaluation.
template <typename T>
ModelParams<T> load_params(const std::string& path, RunConfig* cfg_out = nullptr);

struct GradcheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t checked = 0;
};

// Tiny model used by the end-to-end gradient check.
ModelConfig gradcheck_config();

// Analytic gradient of the summed per-segment BC loss against central
// differences on every parameter, in double precision, with MoE routing
// frozen at the evaluation point. In detach mode the incoming memory of each
// segment is held at its unperturbed value, which is what the cut graph
// differentiates; in bptt mode plain differences of the total loss are used.
GradcheckReport model_gradcheck(const ModelConfig& cfg, int length, std::uint64_t seed, double step = 1e-5);

}  // namespace elmur
