#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "elmur/numcore.hpp"

namespace elmur {

// Anchor value of a slot that has never been written.
inline constexpr std::int64_t kEmptyAnchor = -1;

struct LruConfig {
  int slots = 2;
  double blend = 0.05;     // convex weight of the new content once all slots are full
  double init_std = 0.001;

  void validate() const;
};

// How the write slot is chosen. SlotZero always blends into slot 0 and is
// only used by the "no LRU" ablation.
enum class WritePolicy { Lru, SlotZero };

template <typename T>
struct MemoryState {
  Tensor<T> m;                         // [B, M, d]
  std::vector<std::int64_t> anchors;   // [B, M], kEmptyAnchor marks an empty slot
  int writes = 0;                      // lru_update calls that produced this state

  int batch() const { return m.dim(0); }
  int slots() const { return m.dim(1); }
  int dim() const { return m.dim(2); }
  MemoryState detached() const { return {m.detach(), anchors, writes}; }
};

template <typename T>
MemoryState<T> lru_init(const LruConfig& cfg, int batch, int dim, std::uint64_t seed);

struct SlotChoice {
  int slot = 0;
  double alpha = 1.0;
};

// First empty slot with alpha 1, else the smallest anchor (lowest index on
// ties) with alpha = blend.
SlotChoice lru_choose(std::span<const std::int64_t> row_anchors, double blend, WritePolicy policy = WritePolicy::Lru);

// Writes one slot per active batch row:
//   m'[j*] = alpha * candidates[j*] + (1 - alpha) * m[j*],  p'[j*] = t.
// `times` holds the newest token time per row and must exceed every anchor in
// that row. Rows with active[b] == 0 are left untouched. When a tape is
// active, the blend is differentiable in both the old memory and the
// candidates.
template <typename T>
MemoryState<T> lru_update(const MemoryState<T>& state, const Tensor<T>& candidates, std::span<const std::int64_t> times,
                          const LruConfig& cfg, WritePolicy policy = WritePolicy::Lru,
                          std::span<const std::uint8_t> active = {});

template <typename T>
MemoryState<T> lru_update(const MemoryState<T>& state, const Tensor<T>& candidates, std::int64_t time,
                          const LruConfig& cfg, WritePolicy policy = WritePolicy::Lru);

}  // namespace elmur
