#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "elmur/numcore.hpp"

namespace elmur {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

// Records top-k routing decisions on the first pass and replays them later,
// so finite-difference checks see a piecewise-constant router.
struct RoutingLog {
  enum class Mode { Record, Replay };
  Mode mode = Mode::Record;
  std::vector<std::vector<int>> decisions;
  std::size_t cursor = 0;
};

// Per-forward switches shared by every block.
struct RunContext {
  bool train = false;
  Rng* rng = nullptr;  // required when train is set and any dropout rate is nonzero
  double dropout = 0.0;
  double attn_dropout = 0.0;
  RoutingLog* routing = nullptr;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], may be undefined

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Linear<T> make_linear(int in, int out, bool with_bias, Rng& rng);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& p);

template <typename T>
struct NormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
NormParams<T> make_norm(int d);

// Learned per-head bias indexed by a clamped offset. Row index of offset
// `delta` is clamp(delta, -(D-1), D-1) + D - 1, so the table has 2D-1 rows.
template <typename T>
struct RelativeBiasTable {
  int max_distance = 1;
  int heads = 1;
  Tensor<T> table;  // [2 * max_distance - 1, heads]

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
RelativeBiasTable<T> make_relative_bias(int max_distance, int heads);

enum class BiasDirection { Read, Write };

// Table rows for token times `times` ([batch, tokens]) against slot anchors
// `anchors` ([batch, slots]). Read gives [batch, tokens, slots] with offset
// t - p; Write gives [batch, slots, tokens] with offset p - t. A sentinel
// anchor (< 0) is pinned to the far edge: +(D-1) for reads, -(D-1) for writes.
std::vector<int> relative_bias_indices(std::span<const std::int64_t> times, std::span<const std::int64_t> anchors,
                                       int batch, int tokens, int slots, BiasDirection direction, int max_distance);

// [B, H, L, M] for reads, [B, H, M, L] for writes.
template <typename T>
Tensor<T> relative_bias(const RelativeBiasTable<T>& table, std::span<const std::int64_t> times,
                        std::span<const std::int64_t> anchors, int batch, int tokens, int slots,
                        BiasDirection direction);

template <typename T>
struct AttentionParams {
  int heads = 1;
  Linear<T> q, k, v, o;

  int head_dim() const { return q.weight.dim(1) / heads; }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
AttentionParams<T> make_attention(int d_model, int heads, Rng& rng);

// Scaled dot-product attention between `query_src` [B, Lq, d] and `kv_src`
// [B, Lk, d]. `bias`, when defined, is added to the [B, H, Lq, Lk] logits;
// `mask`, when given, must broadcast to the same shape.
template <typename T>
Tensor<T> attention(const Tensor<T>& query_src, const Tensor<T>& kv_src, const Tensor<T>& bias, const Mask* mask,
                    const AttentionParams<T>& p, const RunContext& ctx);

// Causal self-attention with a learned relative-position bias over
// within-segment offsets i - j.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& h, const AttentionParams<T>& p, const RelativeBiasTable<T>& positions,
                         const RunContext& ctx);

// Non-causal cross-attention; `key_mask` ([B, 1, 1, Lk]) hides padded keys.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& query_src, const Tensor<T>& kv_src, const Tensor<T>& bias,
                          const Mask* key_mask, const AttentionParams<T>& p, const RunContext& ctx);

template <typename T>
Tensor<T> add_norm(const Tensor<T>& residual, const Tensor<T>& delta, const NormParams<T>& norm);

template <typename T>
struct MlpParams {
  Linear<T> up;
  Linear<T> down;

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
MlpParams<T> make_mlp(int d_model, int hidden, Rng& rng);
template <typename T>
Tensor<T> ffn_mlp(const Tensor<T>& x, const MlpParams<T>& p);

struct MoeShape {
  int routed = 1;
  int shared = 0;
  int top_k = 1;
  int routed_hidden = 32;
  int shared_hidden = 32;
};

template <typename T>
struct MoeParams {
  int top_k = 1;
  Linear<T> router;  // [d, routed], no bias
  std::vector<MlpParams<T>> routed;
  std::vector<MlpParams<T>> shared;

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
MoeParams<T> make_moe(int d_model, const MoeShape& shape, Rng& rng);

// Shared experts always fire; each token additionally mixes its top-k routed
// experts with router softmax weights renormalized over the selection.
template <typename T>
Tensor<T> ffn_moe(const Tensor<T>& x, const MoeParams<T>& p, const RunContext& ctx);

enum class FfnKind { Mlp, Moe };

template <typename T>
struct FeedForward {
  FfnKind kind = FfnKind::Mlp;
  MlpParams<T> mlp;
  MoeParams<T> moe;

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const FeedForward<T>& p, const RunContext& ctx);

}  // namespace elmur
