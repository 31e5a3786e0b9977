#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "elmur/layers.hpp"
#include "elmur/memory.hpp"
#include "elmur/trajectory.hpp"

namespace elmur {

enum class ActionSpace { Discrete, Continuous };

// Detach cuts the graph at every segment boundary: the memory that segment i
// reads is a constant. Bptt keeps the graph across segments of one batch so
// the write path receives gradient from later reads.
enum class MemoryGradient { Detach, Bptt };

struct ModelConfig {
  int obs_dim = 3;
  ActionSpace action_space = ActionSpace::Discrete;
  int action_dim = 3;  // number of actions, or continuous action width

  int d_model = 128;
  int n_layers = 2;
  int heads = 2;
  int context_length = 10;
  int max_distance = 32;  // D_max of the token/memory bias table

  int memory_slots = 2;
  double lru_blend = 0.05;
  double memory_init_std = 0.001;

  FfnKind ffn_kind = FfnKind::Moe;
  int mlp_hidden = 128;
  MoeShape moe{2, 2, 2, 32, 512};

  double dropout = 0.10;
  double attn_dropout = 0.17;
  double memory_dropout = 0.01;

  bool shared_memory = false;
  bool rel_bias = true;
  bool lru = true;
  MemoryGradient memory_gradient = MemoryGradient::Detach;

  void validate() const;
  LruConfig lru_config() const { return {memory_slots, lru_blend, memory_init_std}; }
  WritePolicy write_policy() const { return lru ? WritePolicy::Lru : WritePolicy::SlotZero; }
};

template <typename T>
struct LayerParams {
  AttentionParams<T> self_attn;
  RelativeBiasTable<T> positions;  // within-segment offsets
  NormParams<T> norm_self;
  AttentionParams<T> read;
  NormParams<T> norm_read;
  FeedForward<T> token_ffn;
  NormParams<T> norm_ffn;
  RelativeBiasTable<T> memory_bias;  // shared by read and write; undefined when rel_bias is off
  AttentionParams<T> write;
  NormParams<T> norm_write;
  FeedForward<T> memory_ffn;
  NormParams<T> norm_memory_ffn;

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct ModelParams {
  Linear<T> encoder;
  std::vector<LayerParams<T>> layers;
  Linear<T> head;

  ParamList<T> named_parameters() const;
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
std::size_t count_parameters(const ModelParams<T>& params);

template <typename T>
using LayerStates = std::vector<MemoryState<T>>;

// Fresh memory for a batch; row b is sampled from row_seeds[b] alone, so a
// row's memory does not depend on which batch it sits in.
template <typename T>
LayerStates<T> init_states(const ModelConfig& cfg, std::span<const std::uint64_t> row_seeds);

template <typename T>
struct Segment {
  Tensor<T> obs;                     // [B, L', obs_dim]
  std::vector<std::int64_t> times;   // [B, L']
  std::vector<std::uint8_t> valid;   // [B, L'], 0 marks padding
  std::vector<int> actions;          // [B, L'], -1 on padding
  std::vector<T> action_values;      // [B, L', action_dim] for continuous spaces

  int batch() const { return obs.dim(0); }
  int length() const { return obs.dim(1); }
};

// Episodes padded to a common length. Rows keep their own lengths.
struct EpisodeBatch {
  int batch = 0;
  int max_length = 0;
  int obs_dim = 0;
  int action_dim = 0;
  std::vector<int> lengths;
  std::vector<double> obs;            // [B, T, obs_dim]
  std::vector<int> actions;           // [B, T], -1 past the end
  std::vector<double> action_values;  // [B, T, action_dim]
};

EpisodeBatch make_batch(std::span<const Trajectory> episodes);
EpisodeBatch make_batch(std::span<const Trajectory* const> episodes);

inline int segment_count(int length, int context) { return (length + context - 1) / context; }

template <typename T>
Segment<T> segment_at(const EpisodeBatch& batch, int index, int context);

template <typename T>
Tensor<T> obs_encoder(const Tensor<T>& obs, const Linear<T>& p);

// Token track of one layer: self-attention, memory read, token FFN.
template <typename T>
Tensor<T> layer_token_track(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                            const LayerParams<T>& p, const ModelConfig& cfg, const RunContext& ctx);

// Memory track: candidates for every slot, before the LRU write.
template <typename T>
Tensor<T> layer_memory_candidates(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                                  std::span<const std::uint8_t> valid, const LayerParams<T>& p,
                                  const ModelConfig& cfg, const RunContext& ctx);

// Newest valid time and activity per row, as consumed by lru_update.
void write_times(std::span<const std::int64_t> times, std::span<const std::uint8_t> valid, int batch, int length,
                 std::vector<std::int64_t>& out_times, std::vector<std::uint8_t>& out_active);

template <typename T>
struct LayerOutput {
  Tensor<T> h;
  MemoryState<T> memory;
};

template <typename T>
LayerOutput<T> elmur_layer_forward(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                                   std::span<const std::uint8_t> valid, const LayerParams<T>& p,
                                   const ModelConfig& cfg, const RunContext& ctx);

template <typename T>
struct SegmentOutput {
  Tensor<T> outputs;  // [B, L', action_dim]: logits or means
  LayerStates<T> states;
};

template <typename T>
SegmentOutput<T> forward_segment(const Segment<T>& segment, const LayerStates<T>& states, const ModelParams<T>& params,
                                 const ModelConfig& cfg, const RunContext& ctx);

template <typename T>
struct TrajectoryOutput {
  std::vector<Tensor<T>> outputs;  // one per segment
  LayerStates<T> states;
};

// Called after each segment, e.g. to accumulate the loss.
template <typename T>
using SegmentCallback = std::function<void(int index, const Segment<T>& segment, const Tensor<T>& outputs)>;

// Runs all ceil(T / L) segments in order, carrying memory between them.
template <typename T>
TrajectoryOutput<T> forward_trajectory(const EpisodeBatch& batch, const ModelParams<T>& params, const ModelConfig& cfg,
                                       const RunContext& ctx, LayerStates<T> states,
                                       const SegmentCallback<T>& on_segment = {});

}  // namespace elmur
