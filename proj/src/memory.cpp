#include "elmur/memory.hpp"

#include <algorithm>
#include <string>

namespace elmur {

void LruConfig::validate() const {
  if (slots < 1) throw std::invalid_argument("lru: slot count must be >= 1");
  if (!(blend >= 0.0 && blend <= 1.0)) throw std::invalid_argument("lru: blend must lie in [0, 1]");
  if (!(init_std >= 0.0)) throw std::invalid_argument("lru: init std must be >= 0");
}

template <typename T>
MemoryState<T> lru_init(const LruConfig& cfg, int batch, int dim, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::vector<T> m(static_cast<std::size_t>(batch) * cfg.slots * dim, T(0));
  if (cfg.init_std > 0.0)
    for (T& v : m) v = static_cast<T>(rng.normal(0.0, cfg.init_std));
  MemoryState<T> s;
  s.m = Tensor<T>({batch, cfg.slots, dim}, std::move(m));
  s.anchors.assign(static_cast<std::size_t>(batch) * cfg.slots, kEmptyAnchor);
  return s;
}

SlotChoice lru_choose(std::span<const std::int64_t> row_anchors, double blend, WritePolicy policy) {
  if (policy == WritePolicy::SlotZero) return {0, blend};
  for (std::size_t j = 0; j < row_anchors.size(); ++j)
    if (row_anchors[j] < 0) return {static_cast<int>(j), 1.0};
  auto it = std::min_element(row_anchors.begin(), row_anchors.end());  // first minimum
  return {static_cast<int>(it - row_anchors.begin()), blend};
}

template <typename T>
MemoryState<T> lru_update(const MemoryState<T>& state, const Tensor<T>& candidates, std::span<const std::int64_t> times,
                          const LruConfig& cfg, WritePolicy policy, std::span<const std::uint8_t> active) {
  const int b = state.batch(), slots = state.slots(), d = state.dim();
  if (candidates.shape() != state.m.shape())
    throw ShapeError("lru_update: candidates " + shape_str(candidates.shape()) + " vs memory " +
                     shape_str(state.m.shape()));
  if (times.size() != static_cast<std::size_t>(b)) throw ShapeError("lru_update: need one time per batch row");
  if (!active.empty() && active.size() != static_cast<std::size_t>(b))
    throw ShapeError("lru_update: active mask must have one entry per batch row");

  MemoryState<T> out;
  out.anchors = state.anchors;
  out.writes = state.writes + 1;
  std::vector<T> m(state.m.values().begin(), state.m.values().end());
  const T* u = candidates.values().data();
  auto slot_of = std::make_shared<std::vector<int>>(b, -1);
  auto alpha_of = std::make_shared<std::vector<T>>(b, T(0));

  for (int r = 0; r < b; ++r) {
    if (!active.empty() && !active[r]) continue;
    std::span<const std::int64_t> row(state.anchors.data() + static_cast<std::size_t>(r) * slots, slots);
    const std::int64_t newest = *std::max_element(row.begin(), row.end());
    if (times[r] < 0 || times[r] <= newest)
      throw std::invalid_argument("lru_update: write time " + std::to_string(times[r]) +
                                  " must exceed the newest anchor " + std::to_string(newest) + " in row " +
                                  std::to_string(r));
    SlotChoice c = lru_choose(row, cfg.blend, policy);
    const T alpha = static_cast<T>(c.alpha);
    const std::size_t base = (static_cast<std::size_t>(r) * slots + c.slot) * d;
    for (int i = 0; i < d; ++i) m[base + i] = alpha * u[base + i] + (T(1) - alpha) * m[base + i];
    out.anchors[static_cast<std::size_t>(r) * slots + c.slot] = times[r];
    (*slot_of)[r] = c.slot;
    (*alpha_of)[r] = alpha;
  }

  const bool track = detail::tracking({&state.m, &candidates});
  out.m = detail::make_result(state.m.shape(), std::move(m), track, "lru_update");
  detail::record<T>(out.m, [mn = state.m.node(), un = candidates.node(), slot_of, alpha_of, slots, d](
                               detail::Node<T>& o) {
    const int b = static_cast<int>(slot_of->size());
    if (mn->requires_grad) {
      mn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) mn->grad[i] += o.grad[i];
    }
    for (int r = 0; r < b; ++r) {
      const int j = (*slot_of)[r];
      if (j < 0) continue;
      const T a = (*alpha_of)[r];
      const std::size_t base = (static_cast<std::size_t>(r) * slots + j) * d;
      if (mn->requires_grad)
        for (int i = 0; i < d; ++i) mn->grad[base + i] -= a * o.grad[base + i];
      if (un->requires_grad) {
        un->ensure_grad();
        for (int i = 0; i < d; ++i) un->grad[base + i] += a * o.grad[base + i];
      }
    }
  });
  return out;
}

template <typename T>
MemoryState<T> lru_update(const MemoryState<T>& state, const Tensor<T>& candidates, std::int64_t time,
                          const LruConfig& cfg, WritePolicy policy) {
  std::vector<std::int64_t> times(static_cast<std::size_t>(state.batch()), time);
  return lru_update(state, candidates, times, cfg, policy);
}

#define ELMUR_INSTANTIATE_MEMORY(T)                                                                          \
  template struct MemoryState<T>;                                                                            \
  template MemoryState<T> lru_init<T>(const LruConfig&, int, int, std::uint64_t);                            \
  template MemoryState<T> lru_update<T>(const MemoryState<T>&, const Tensor<T>&, std::span<const std::int64_t>, \
                                        const LruConfig&, WritePolicy, std::span<const std::uint8_t>);       \
  template MemoryState<T> lru_update<T>(const MemoryState<T>&, const Tensor<T>&, std::int64_t, const LruConfig&, \
                                        WritePolicy);

ELMUR_INSTANTIATE_MEMORY(float)
ELMUR_INSTANTIATE_MEMORY(double)

}  // namespace elmur
