#include "elmur/layers.hpp"

#include <algorithm>
#include <cmath>

namespace elmur {

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
Linear<T> make_linear(int in, int out, bool with_bias, Rng& rng) {
  Linear<T> p;
  std::vector<T> w(static_cast<std::size_t>(in) * out);
  const double std = 1.0 / std::sqrt(static_cast<double>(in));
  for (T& v : w) v = static_cast<T>(rng.normal(0.0, std));
  p.weight = Tensor<T>({in, out}, std::move(w), true);
  if (with_bias) p.bias = Tensor<T>::zeros({out}, true);
  return p;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& p) {
  Tensor<T> y = matmul(x, p.weight);
  return p.bias.defined() ? add(y, p.bias) : y;
}

template <typename T>
void NormParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
NormParams<T> make_norm(int d) {
  return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
}

template <typename T>
void RelativeBiasTable<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.emplace_back(prefix + ".table", table);
}

template <typename T>
RelativeBiasTable<T> make_relative_bias(int max_distance, int heads) {
  if (max_distance < 1) throw std::invalid_argument("relative bias: max_distance must be >= 1");
  RelativeBiasTable<T> t;
  t.max_distance = max_distance;
  t.heads = heads;
  t.table = Tensor<T>::zeros({2 * max_distance - 1, heads}, true);
  return t;
}

std::vector<int> relative_bias_indices(std::span<const std::int64_t> times, std::span<const std::int64_t> anchors,
                                       int batch, int tokens, int slots, BiasDirection direction, int max_distance) {
  if (times.size() != static_cast<std::size_t>(batch) * tokens ||
      anchors.size() != static_cast<std::size_t>(batch) * slots)
    throw ShapeError("relative_bias: times/anchors do not match batch shape");
  const std::int64_t edge = max_distance - 1;
  auto row = [edge](std::int64_t delta) {
    return static_cast<int>(std::clamp(delta, -edge, edge) + edge);
  };
  std::vector<int> idx(static_cast<std::size_t>(batch) * tokens * slots);
  std::size_t k = 0;
  for (int b = 0; b < batch; ++b) {
    const std::int64_t* t = times.data() + static_cast<std::size_t>(b) * tokens;
    const std::int64_t* p = anchors.data() + static_cast<std::size_t>(b) * slots;
    if (direction == BiasDirection::Read) {
      for (int i = 0; i < tokens; ++i)
        for (int j = 0; j < slots; ++j) idx[k++] = p[j] < 0 ? row(edge) : row(t[i] - p[j]);
    } else {
      for (int j = 0; j < slots; ++j)
        for (int i = 0; i < tokens; ++i) idx[k++] = p[j] < 0 ? row(-edge) : row(p[j] - t[i]);
    }
  }
  return idx;
}

template <typename T>
Tensor<T> relative_bias(const RelativeBiasTable<T>& table, std::span<const std::int64_t> times,
                        std::span<const std::int64_t> anchors, int batch, int tokens, int slots,
                        BiasDirection direction) {
  auto idx = relative_bias_indices(times, anchors, batch, tokens, slots, direction, table.max_distance);
  Shape s = direction == BiasDirection::Read ? Shape{batch, tokens, slots} : Shape{batch, slots, tokens};
  return permute(gather_rows(table.table, idx, s), {0, 3, 1, 2});
}

template <typename T>
void AttentionParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

template <typename T>
AttentionParams<T> make_attention(int d_model, int heads, Rng& rng) {
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("attention: d_model " + std::to_string(d_model) + " not divisible by heads " +
                                std::to_string(heads));
  AttentionParams<T> p;
  p.heads = heads;
  p.q = make_linear<T>(d_model, d_model, true, rng);
  p.k = make_linear<T>(d_model, d_model, true, rng);
  p.v = make_linear<T>(d_model, d_model, true, rng);
  p.o = make_linear<T>(d_model, d_model, true, rng);
  return p;
}

namespace {

// [B, L, d] -> [B, H, L, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  const int b = x.dim(0), l = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, l, heads, d / heads}), {0, 2, 1, 3});
}

}  // namespace

template <typename T>
Tensor<T> attention(const Tensor<T>& query_src, const Tensor<T>& kv_src, const Tensor<T>& bias, const Mask* mask,
                    const AttentionParams<T>& p, const RunContext& ctx) {
  if (query_src.rank() != 3 || kv_src.rank() != 3 || query_src.dim(0) != kv_src.dim(0) ||
      query_src.dim(2) != kv_src.dim(2))
    throw ShapeError("attention: expected [B, L, d] inputs, got " + shape_str(query_src.shape()) + " and " +
                     shape_str(kv_src.shape()));
  const int b = query_src.dim(0), lq = query_src.dim(1), lk = kv_src.dim(1), d = query_src.dim(2);
  const int h = p.heads, dh = d / h;

  Tensor<T> q = split_heads(linear(query_src, p.q), h);
  Tensor<T> k = permute(reshape(linear(kv_src, p.k), {b, lk, h, dh}), {0, 2, 3, 1});  // [B, H, dh, Lk]
  Tensor<T> v = split_heads(linear(kv_src, p.v), h);

  Tensor<T> logits = scale(matmul(q, k), T(1.0 / std::sqrt(static_cast<double>(dh))));
  if (bias.defined()) {
    Shape expect{b, h, lq, lk};
    if (detail::broadcast_shapes(logits.shape(), bias.shape()) != expect)
      throw ShapeError("attention: bias " + shape_str(bias.shape()) + " does not match logits " + shape_str(expect));
    logits = add(logits, bias);
  }
  Tensor<T> weights = mask ? masked_softmax(logits, *mask) : softmax(logits);
  if (ctx.train && ctx.attn_dropout > 0.0) weights = dropout(weights, ctx.attn_dropout, *ctx.rng);
  Tensor<T> mixed = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {b, lq, d});
  return linear(mixed, p.o);
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& h, const AttentionParams<T>& p, const RelativeBiasTable<T>& positions,
                         const RunContext& ctx) {
  if (h.rank() != 3) throw ShapeError("self_attention: expected [B, L, d]");
  const int l = h.dim(1);
  if (l > positions.max_distance)
    throw ShapeError("self_attention: segment length " + std::to_string(l) + " exceeds context " +
                     std::to_string(positions.max_distance));
  const int edge = positions.max_distance - 1;
  std::vector<int> idx(static_cast<std::size_t>(l) * l);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) idx[static_cast<std::size_t>(i) * l + j] = std::clamp(i - j, -edge, edge) + edge;
  Tensor<T> bias = permute(gather_rows(positions.table, idx, {l, l}), {2, 0, 1});  // [H, L, L]
  Mask causal = Mask::causal(l);
  return attention(h, h, bias, &causal, p, ctx);
}

template <typename T>
Tensor<T> cross_attention(const Tensor<T>& query_src, const Tensor<T>& kv_src, const Tensor<T>& bias,
                          const Mask* key_mask, const AttentionParams<T>& p, const RunContext& ctx) {
  return attention(query_src, kv_src, bias, key_mask, p, ctx);
}

template <typename T>
Tensor<T> add_norm(const Tensor<T>& residual, const Tensor<T>& delta, const NormParams<T>& norm) {
  if (residual.shape() != delta.shape())
    throw ShapeError("add_norm: " + shape_str(residual.shape()) + " vs " + shape_str(delta.shape()));
  return layer_norm(add(residual, delta), norm.gain, norm.bias);
}

template <typename T>
void MlpParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
}

template <typename T>
MlpParams<T> make_mlp(int d_model, int hidden, Rng& rng) {
  return {make_linear<T>(d_model, hidden, true, rng), make_linear<T>(hidden, d_model, true, rng)};
}

template <typename T>
Tensor<T> ffn_mlp(const Tensor<T>& x, const MlpParams<T>& p) {
  return linear(gelu(linear(x, p.up)), p.down);
}

template <typename T>
void MoeParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  router.collect(prefix + ".router", out);
  for (std::size_t e = 0; e < routed.size(); ++e) routed[e].collect(prefix + ".routed" + std::to_string(e), out);
  for (std::size_t e = 0; e < shared.size(); ++e) shared[e].collect(prefix + ".shared" + std::to_string(e), out);
}

template <typename T>
MoeParams<T> make_moe(int d_model, const MoeShape& shape, Rng& rng) {
  if (shape.routed < 1 || shape.top_k < 1 || shape.top_k > shape.routed)
    throw std::invalid_argument("moe: need 1 <= top_k <= routed experts");
  MoeParams<T> p;
  p.top_k = shape.top_k;
  p.router = make_linear<T>(d_model, shape.routed, false, rng);
  for (int e = 0; e < shape.routed; ++e) p.routed.push_back(make_mlp<T>(d_model, shape.routed_hidden, rng));
  for (int e = 0; e < shape.shared; ++e) p.shared.push_back(make_mlp<T>(d_model, shape.shared_hidden, rng));
  return p;
}

template <typename T>
Tensor<T> ffn_moe(const Tensor<T>& x, const MoeParams<T>& p, const RunContext& ctx) {
  const int d = x.dim(-1);
  const int n = static_cast<int>(x.numel() / d);
  const int experts = static_cast<int>(p.routed.size());
  const int k = p.top_k;
  Tensor<T> flat = reshape(x, {n, d});

  Tensor<T> probs = softmax(linear(flat, p.router));  // [n, E]
  std::vector<int> chosen;
  if (ctx.routing && ctx.routing->mode == RoutingLog::Mode::Replay) {
    if (ctx.routing->cursor >= ctx.routing->decisions.size())
      throw std::logic_error("moe: routing replay exhausted");
    chosen = ctx.routing->decisions[ctx.routing->cursor++];
    if (chosen.size() != static_cast<std::size_t>(n) * k) throw std::logic_error("moe: routing replay shape mismatch");
  } else {
    chosen = topk(probs, k).indices;
    if (ctx.routing) ctx.routing->decisions.push_back(chosen);
  }

  std::vector<T> sel(static_cast<std::size_t>(n) * experts, T(0));
  std::vector<std::vector<int>> rows(experts);
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < k; ++j) {
      int e = chosen[static_cast<std::size_t>(t) * k + j];
      sel[static_cast<std::size_t>(t) * experts + e] = T(1);
      rows[e].push_back(t);
    }
  Tensor<T> picked = mul(probs, Tensor<T>({n, experts}, std::move(sel)));
  Tensor<T> gates = div(picked, sum_last(picked));  // [n, E], rows sum to 1 over the selection

  Tensor<T> out;
  auto accumulate = [&out](const Tensor<T>& y) { out = out.defined() ? add(out, y) : y; };
  for (const auto& expert : p.shared) accumulate(ffn_mlp(flat, expert));
  for (int e = 0; e < experts; ++e) {
    if (rows[e].empty()) continue;
    const int ne = static_cast<int>(rows[e].size());
    std::vector<int> column(static_cast<std::size_t>(n), e);
    Tensor<T> gate_e = gather_rows(take_last(gates, column, 1), rows[e], {ne});  // [ne, 1]
    Tensor<T> y = mul(ffn_mlp(gather_rows(flat, rows[e], {ne}), p.routed[e]), gate_e);
    accumulate(scatter_add_rows(y, rows[e], n));
  }
  return reshape(out, x.shape());
}

template <typename T>
void FeedForward<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  if (kind == FfnKind::Mlp)
    mlp.collect(prefix + ".mlp", out);
  else
    moe.collect(prefix + ".moe", out);
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const FeedForward<T>& p, const RunContext& ctx) {
  return p.kind == FfnKind::Mlp ? ffn_mlp(x, p.mlp) : ffn_moe(x, p.moe, ctx);
}

#define ELMUR_INSTANTIATE_LAYERS(T)                                                                            \
  template struct Linear<T>;                                                                                   \
  template struct NormParams<T>;                                                                               \
  template struct RelativeBiasTable<T>;                                                                        \
  template struct AttentionParams<T>;                                                                          \
  template struct MlpParams<T>;                                                                                \
  template struct MoeParams<T>;                                                                                \
  template struct FeedForward<T>;                                                                              \
  template Linear<T> make_linear<T>(int, int, bool, Rng&);                                                     \
  template Tensor<T> linear<T>(const Tensor<T>&, const Linear<T>&);                                            \
  template NormParams<T> make_norm<T>(int);                                                                    \
  template RelativeBiasTable<T> make_relative_bias<T>(int, int);                                               \
  template Tensor<T> relative_bias<T>(const RelativeBiasTable<T>&, std::span<const std::int64_t>,             \
                                      std::span<const std::int64_t>, int, int, int, BiasDirection);            \
  template AttentionParams<T> make_attention<T>(int, int, Rng&);                                               \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Mask*,          \
                                  const AttentionParams<T>&, const RunContext&);                               \
  template Tensor<T> self_attention<T>(const Tensor<T>&, const AttentionParams<T>&, const RelativeBiasTable<T>&, \
                                       const RunContext&);                                                     \
  template Tensor<T> cross_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Mask*,    \
                                        const AttentionParams<T>&, const RunContext&);                         \
  template Tensor<T> add_norm<T>(const Tensor<T>&, const Tensor<T>&, const NormParams<T>&);                    \
  template MlpParams<T> make_mlp<T>(int, int, Rng&);                                                           \
  template Tensor<T> ffn_mlp<T>(const Tensor<T>&, const MlpParams<T>&);                                        \
  template MoeParams<T> make_moe<T>(int, const MoeShape&, Rng&);                                               \
  template Tensor<T> ffn_moe<T>(const Tensor<T>&, const MoeParams<T>&, const RunContext&);                     \
  template Tensor<T> ffn<T>(const Tensor<T>&, const FeedForward<T>&, const RunContext&);

ELMUR_INSTANTIATE_LAYERS(float)
ELMUR_INSTANTIATE_LAYERS(double)

}  // namespace elmur
