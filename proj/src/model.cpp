#include "elmur/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace elmur {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (obs_dim < 1) fail("obs_dim must be >= 1");
  if (action_dim < 1) fail("action_dim must be >= 1");
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (n_layers < 0) fail("n_layers must be >= 0");
  if (context_length < 1) fail("context_length must be >= 1");
  if (max_distance < 1) fail("max_distance must be >= 1");
  if (ffn_kind == FfnKind::Moe && (moe.top_k < 1 || moe.top_k > moe.routed))
    fail("moe top_k must lie in [1, routed experts]");
  for (double p : {dropout, attn_dropout, memory_dropout})
    if (!(p >= 0.0 && p < 1.0)) fail("dropout rates must lie in [0, 1)");
  lru_config().validate();
}

template <typename T>
void LayerParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  self_attn.collect(prefix + ".self_attn", out);
  positions.collect(prefix + ".positions", out);
  norm_self.collect(prefix + ".norm_self", out);
  read.collect(prefix + ".read", out);
  norm_read.collect(prefix + ".norm_read", out);
  token_ffn.collect(prefix + ".token_ffn", out);
  norm_ffn.collect(prefix + ".norm_ffn", out);
  if (memory_bias.table.defined()) memory_bias.collect(prefix + ".memory_bias", out);
  write.collect(prefix + ".write", out);
  norm_write.collect(prefix + ".norm_write", out);
  memory_ffn.collect(prefix + ".memory_ffn", out);
  norm_memory_ffn.collect(prefix + ".norm_memory_ffn", out);
}

template <typename T>
ParamList<T> ModelParams<T>::named_parameters() const {
  ParamList<T> out;
  encoder.collect("encoder", out);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect("layer" + std::to_string(l), out);
  head.collect("head", out);
  return out;
}

namespace {

template <typename T>
FeedForward<T> make_ffn(const ModelConfig& cfg, Rng& rng) {
  FeedForward<T> f;
  f.kind = cfg.ffn_kind;
  if (f.kind == FfnKind::Mlp)
    f.mlp = make_mlp<T>(cfg.d_model, cfg.mlp_hidden, rng);
  else
    f.moe = make_moe<T>(cfg.d_model, cfg.moe, rng);
  return f;
}

RunContext with_rates(const RunContext& ctx, const ModelConfig& cfg) {
  RunContext c = ctx;
  c.dropout = cfg.dropout;
  c.attn_dropout = cfg.attn_dropout;
  return c;
}

template <typename T>
Tensor<T> drop(const Tensor<T>& x, const RunContext& ctx) {
  return ctx.train && ctx.dropout > 0.0 ? dropout(x, ctx.dropout, *ctx.rng) : x;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "params"));
  ModelParams<T> p;
  p.encoder = make_linear<T>(cfg.obs_dim, cfg.d_model, true, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams<T> lp;
    lp.self_attn = make_attention<T>(cfg.d_model, cfg.heads, rng);
    lp.positions = make_relative_bias<T>(cfg.context_length, cfg.heads);
    lp.norm_self = make_norm<T>(cfg.d_model);
    lp.read = make_attention<T>(cfg.d_model, cfg.heads, rng);
    lp.norm_read = make_norm<T>(cfg.d_model);
    lp.token_ffn = make_ffn<T>(cfg, rng);
    lp.norm_ffn = make_norm<T>(cfg.d_model);
    if (cfg.rel_bias) lp.memory_bias = make_relative_bias<T>(cfg.max_distance, cfg.heads);
    lp.write = make_attention<T>(cfg.d_model, cfg.heads, rng);
    lp.norm_write = make_norm<T>(cfg.d_model);
    lp.memory_ffn = make_ffn<T>(cfg, rng);
    lp.norm_memory_ffn = make_norm<T>(cfg.d_model);
    p.layers.push_back(std::move(lp));
  }
  p.head = make_linear<T>(cfg.d_model, cfg.action_dim, true, rng);
  return p;
}

template <typename T>
std::size_t count_parameters(const ModelParams<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params.named_parameters()) n += t.numel();
  return n;
}

template <typename T>
LayerStates<T> init_states(const ModelConfig& cfg, std::span<const std::uint64_t> row_seeds) {
  const int n = cfg.shared_memory ? 1 : cfg.n_layers;
  const int b = static_cast<int>(row_seeds.size());
  const LruConfig lru = cfg.lru_config();
  LayerStates<T> states;
  for (int l = 0; l < n; ++l) {
    std::vector<T> m;
    m.reserve(static_cast<std::size_t>(b) * cfg.memory_slots * cfg.d_model);
    for (int r = 0; r < b; ++r) {
      auto row = lru_init<T>(lru, 1, cfg.d_model, derive_seed(row_seeds[r], "memory", l));
      m.insert(m.end(), row.m.values().begin(), row.m.values().end());
    }
    MemoryState<T> s;
    s.m = Tensor<T>({b, cfg.memory_slots, cfg.d_model}, std::move(m));
    s.anchors.assign(static_cast<std::size_t>(b) * cfg.memory_slots, kEmptyAnchor);
    states.push_back(std::move(s));
  }
  return states;
}

EpisodeBatch make_batch(std::span<const Trajectory* const> episodes) {
  if (episodes.empty()) throw std::invalid_argument("make_batch: no episodes");
  EpisodeBatch b;
  b.batch = static_cast<int>(episodes.size());
  b.obs_dim = episodes[0]->obs_dim;
  for (const Trajectory* e : episodes) {
    if (e->obs_dim != b.obs_dim) throw std::invalid_argument("make_batch: mixed observation widths");
    if (e->length() < 1) throw std::invalid_argument("make_batch: empty trajectory");
    b.lengths.push_back(e->length());
    b.max_length = std::max(b.max_length, e->length());
    if (!e->action_values.empty()) b.action_dim = static_cast<int>(e->action_values.size() / e->length());
  }
  const std::size_t tmax = b.max_length;
  b.obs.assign(b.batch * tmax * b.obs_dim, 0.0);
  b.actions.assign(b.batch * tmax, -1);
  if (b.action_dim > 0) b.action_values.assign(b.batch * tmax * b.action_dim, 0.0);
  for (int r = 0; r < b.batch; ++r) {
    const Trajectory& e = *episodes[r];
    std::copy(e.obs.begin(), e.obs.end(), b.obs.begin() + r * tmax * b.obs_dim);
    if (!e.actions.empty()) {
      if (static_cast<int>(e.actions.size()) != e.length())
        throw std::invalid_argument("make_batch: action count differs from observation count");
      std::copy(e.actions.begin(), e.actions.end(), b.actions.begin() + r * tmax);
    }
    if (b.action_dim > 0) {
      if (e.action_values.size() != static_cast<std::size_t>(e.length()) * b.action_dim)
        throw std::invalid_argument("make_batch: continuous action width differs between episodes");
      std::copy(e.action_values.begin(), e.action_values.end(), b.action_values.begin() + r * tmax * b.action_dim);
    }
  }
  return b;
}

EpisodeBatch make_batch(std::span<const Trajectory> episodes) {
  std::vector<const Trajectory*> ptrs;
  for (const auto& e : episodes) ptrs.push_back(&e);
  return make_batch(std::span<const Trajectory* const>(ptrs));
}

template <typename T>
Segment<T> segment_at(const EpisodeBatch& batch, int index, int context) {
  const int start = index * context;
  if (index < 0 || start >= batch.max_length) throw std::out_of_range("segment_at: index past the batch");
  const int len = std::min(context, batch.max_length - start);
  const int b = batch.batch, od = batch.obs_dim, ad = batch.action_dim;
  const std::size_t tmax = batch.max_length;
  Segment<T> s;
  std::vector<T> obs(static_cast<std::size_t>(b) * len * od);
  s.times.resize(static_cast<std::size_t>(b) * len);
  s.valid.resize(s.times.size());
  s.actions.resize(s.times.size());
  if (ad > 0) s.action_values.resize(s.times.size() * ad);
  for (int r = 0; r < b; ++r)
    for (int i = 0; i < len; ++i) {
      const std::size_t src = r * tmax + start + i, dst = static_cast<std::size_t>(r) * len + i;
      for (int c = 0; c < od; ++c) obs[dst * od + c] = static_cast<T>(batch.obs[src * od + c]);
      for (int c = 0; c < ad; ++c) s.action_values[dst * ad + c] = static_cast<T>(batch.action_values[src * ad + c]);
      s.times[dst] = start + i;
      s.valid[dst] = start + i < batch.lengths[r];
      s.actions[dst] = s.valid[dst] ? batch.actions[src] : -1;
    }
  s.obs = Tensor<T>({b, len, od}, std::move(obs));
  return s;
}

template <typename T>
Tensor<T> obs_encoder(const Tensor<T>& obs, const Linear<T>& p) {
  if (obs.dim(-1) != p.weight.dim(0))
    throw ShapeError("obs_encoder: observation width " + std::to_string(obs.dim(-1)) + ", encoder expects " +
                     std::to_string(p.weight.dim(0)));
  return gelu(linear(obs, p));
}

template <typename T>
Tensor<T> layer_token_track(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                            const LayerParams<T>& p, const ModelConfig& cfg, const RunContext& ctx0) {
  const RunContext ctx = with_rates(ctx0, cfg);
  const int b = h.dim(0), l = h.dim(1);
  Tensor<T> x = add_norm(h, drop(self_attention(h, p.self_attn, p.positions, ctx), ctx), p.norm_self);
  Tensor<T> bias;
  if (cfg.rel_bias)
    bias = relative_bias(p.memory_bias, times, mem.anchors, b, l, mem.slots(), BiasDirection::Read);
  x = add_norm(x, drop(cross_attention(x, mem.m, bias, nullptr, p.read, ctx), ctx), p.norm_read);
  return add_norm(x, drop(ffn(x, p.token_ffn, ctx), ctx), p.norm_ffn);
}

template <typename T>
Tensor<T> layer_memory_candidates(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                                  std::span<const std::uint8_t> valid, const LayerParams<T>& p,
                                  const ModelConfig& cfg, const RunContext& ctx0) {
  const RunContext ctx = with_rates(ctx0, cfg);
  const int b = h.dim(0), l = h.dim(1);
  Tensor<T> bias;
  if (cfg.rel_bias)
    bias = relative_bias(p.memory_bias, times, mem.anchors, b, l, mem.slots(), BiasDirection::Write);
  Mask keys{{b, 1, 1, l}, std::vector<std::uint8_t>(valid.begin(), valid.end())};
  for (int r = 0; r < b; ++r) {  // a fully padded row writes nothing; keep its softmax defined
    auto row = keys.keep.begin() + static_cast<std::ptrdiff_t>(r) * l;
    if (std::find(row, row + l, 1) == row + l) std::fill(row, row + l, 1);
  }
  Tensor<T> u = add_norm(mem.m, drop(cross_attention(mem.m, h, bias, &keys, p.write, ctx), ctx), p.norm_write);
  u = add_norm(u, drop(ffn(u, p.memory_ffn, ctx), ctx), p.norm_memory_ffn);
  if (ctx.train && cfg.memory_dropout > 0.0) u = dropout(u, cfg.memory_dropout, *ctx.rng);
  return u;
}

void write_times(std::span<const std::int64_t> times, std::span<const std::uint8_t> valid, int batch, int length,
                 std::vector<std::int64_t>& out_times, std::vector<std::uint8_t>& out_active) {
  out_times.assign(batch, 0);
  out_active.assign(batch, 0);
  for (int r = 0; r < batch; ++r)
    for (int i = 0; i < length; ++i)
      if (valid[static_cast<std::size_t>(r) * length + i]) {
        out_times[r] = times[static_cast<std::size_t>(r) * length + i];
        out_active[r] = 1;
      }
}

namespace {

template <typename T>
Tensor<T> candidates_for(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                         std::span<const std::uint8_t> valid, const LayerParams<T>& p, const ModelConfig& cfg,
                         const RunContext& ctx) {
  if (cfg.memory_gradient == MemoryGradient::Detach) {
    // Nothing downstream of the candidates inside this segment depends on
    // them, and the boundary is cut, so there is no gradient to record.
    NoGradScope<T> off;
    return layer_memory_candidates(h, mem, times, valid, p, cfg, ctx);
  }
  return layer_memory_candidates(h, mem, times, valid, p, cfg, ctx);
}

}  // namespace

template <typename T>
LayerOutput<T> elmur_layer_forward(const Tensor<T>& h, const MemoryState<T>& mem, std::span<const std::int64_t> times,
                                   std::span<const std::uint8_t> valid, const LayerParams<T>& p,
                                   const ModelConfig& cfg, const RunContext& ctx) {
  LayerOutput<T> out;
  out.h = layer_token_track(h, mem, times, p, cfg, ctx);
  Tensor<T> u = candidates_for(out.h, mem, times, valid, p, cfg, ctx);
  std::vector<std::int64_t> t;
  std::vector<std::uint8_t> active;
  write_times(times, valid, h.dim(0), h.dim(1), t, active);
  out.memory = lru_update(mem, u, t, cfg.lru_config(), cfg.write_policy(), active);
  return out;
}

template <typename T>
SegmentOutput<T> forward_segment(const Segment<T>& seg, const LayerStates<T>& states, const ModelParams<T>& params,
                                 const ModelConfig& cfg, const RunContext& ctx0) {
  const int expect = cfg.shared_memory ? 1 : cfg.n_layers;
  if (static_cast<int>(states.size()) != expect)
    throw std::invalid_argument("forward_segment: expected " + std::to_string(expect) + " memory states, got " +
                                std::to_string(states.size()));
  const RunContext ctx = with_rates(ctx0, cfg);
  const int b = seg.batch(), l = seg.length();
  std::vector<std::int64_t> t;
  std::vector<std::uint8_t> active;
  write_times(seg.times, seg.valid, b, l, t, active);

  Tensor<T> h = drop(obs_encoder(seg.obs, params.encoder), ctx);
  SegmentOutput<T> out;
  if (!cfg.shared_memory) {
    for (int i = 0; i < cfg.n_layers; ++i) {
      const auto& p = params.layers[i];
      h = layer_token_track(h, states[i], seg.times, p, cfg, ctx);
      Tensor<T> u = candidates_for(h, states[i], seg.times, seg.valid, p, cfg, ctx);
      out.states.push_back(lru_update(states[i], u, t, cfg.lru_config(), cfg.write_policy(), active));
    }
  } else {
    // Every layer reads the same state; their candidates are averaged into
    // one write per segment.
    Tensor<T> mixed;
    for (int i = 0; i < cfg.n_layers; ++i) {
      const auto& p = params.layers[i];
      h = layer_token_track(h, states[0], seg.times, p, cfg, ctx);
      Tensor<T> u = candidates_for(h, states[0], seg.times, seg.valid, p, cfg, ctx);
      mixed = mixed.defined() ? add(mixed, u) : u;
    }
    if (mixed.defined())
      out.states.push_back(lru_update(states[0], scale(mixed, T(1.0 / cfg.n_layers)), t, cfg.lru_config(),
                                      cfg.write_policy(), active));
    else
      out.states.push_back(states[0]);
  }
  out.outputs = linear(h, params.head);
  return out;
}

template <typename T>
TrajectoryOutput<T> forward_trajectory(const EpisodeBatch& batch, const ModelParams<T>& params, const ModelConfig& cfg,
                                       const RunContext& ctx, LayerStates<T> states,
                                       const SegmentCallback<T>& on_segment) {
  if (batch.max_length < 1) throw std::invalid_argument("forward_trajectory: empty trajectory");
  if (batch.obs_dim != cfg.obs_dim)
    throw ShapeError("forward_trajectory: batch observation width " + std::to_string(batch.obs_dim) +
                     " differs from the model's " + std::to_string(cfg.obs_dim));
  TrajectoryOutput<T> out;
  const int segments = segment_count(batch.max_length, cfg.context_length);
  for (int i = 0; i < segments; ++i) {
    if (cfg.memory_gradient == MemoryGradient::Detach)
      for (auto& s : states) s = s.detached();
    Segment<T> seg = segment_at<T>(batch, i, cfg.context_length);
    SegmentOutput<T> so = forward_segment(seg, states, params, cfg, ctx);
    if (on_segment) on_segment(i, seg, so.outputs);
    out.outputs.push_back(std::move(so.outputs));
    states = std::move(so.states);
  }
  out.states = std::move(states);
  return out;
}

#define ELMUR_INSTANTIATE_MODEL(T)                                                                             \
  template struct LayerParams<T>;                                                                              \
  template struct ModelParams<T>;                                                                              \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                                   \
  template std::size_t count_parameters<T>(const ModelParams<T>&);                                             \
  template LayerStates<T> init_states<T>(const ModelConfig&, std::span<const std::uint64_t>);                  \
  template Segment<T> segment_at<T>(const EpisodeBatch&, int, int);                                            \
  template Tensor<T> obs_encoder<T>(const Tensor<T>&, const Linear<T>&);                                       \
  template Tensor<T> layer_token_track<T>(const Tensor<T>&, const MemoryState<T>&, std::span<const std::int64_t>, \
                                          const LayerParams<T>&, const ModelConfig&, const RunContext&);        \
  template Tensor<T> layer_memory_candidates<T>(const Tensor<T>&, const MemoryState<T>&,                       \
                                                std::span<const std::int64_t>, std::span<const std::uint8_t>,  \
                                                const LayerParams<T>&, const ModelConfig&, const RunContext&); \
  template LayerOutput<T> elmur_layer_forward<T>(const Tensor<T>&, const MemoryState<T>&,                      \
                                                 std::span<const std::int64_t>, std::span<const std::uint8_t>, \
                                                 const LayerParams<T>&, const ModelConfig&, const RunContext&); \
  template SegmentOutput<T> forward_segment<T>(const Segment<T>&, const LayerStates<T>&, const ModelParams<T>&, \
                                               const ModelConfig&, const RunContext&);                         \
  template TrajectoryOutput<T> forward_trajectory<T>(const EpisodeBatch&, const ModelParams<T>&,               \
                                                     const ModelConfig&, const RunContext&, LayerStates<T>,    \
                                                     const SegmentCallback<T>&);

ELMUR_INSTANTIATE_MODEL(float)
ELMUR_INSTANTIATE_MODEL(double)

}  // namespace elmur
