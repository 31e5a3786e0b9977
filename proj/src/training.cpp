#include "elmur/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace elmur {

template <typename T>
Tensor<T> bc_loss(const Tensor<T>& outputs, const Segment<T>& seg, ActionSpace space, double label_smoothing) {
  const int b = seg.batch(), l = seg.length(), a = outputs.dim(-1);
  if (outputs.rank() != 3 || outputs.dim(0) != b || outputs.dim(1) != l)
    throw ShapeError("bc_loss: outputs " + shape_str(outputs.shape()) + " do not match segment");
  const std::size_t tokens = static_cast<std::size_t>(b) * l;
  std::size_t count = 0;
  for (auto v : seg.valid) count += v != 0;
  if (count == 0) throw std::invalid_argument("bc_loss: every token is padding");

  std::vector<T> target(tokens * a, T(0));
  if (space == ActionSpace::Discrete) {
    const T off = static_cast<T>(label_smoothing / a), on = static_cast<T>(1.0 - label_smoothing) + off;
    for (std::size_t i = 0; i < tokens; ++i) {
      if (!seg.valid[i]) continue;
      const int y = seg.actions[i];
      if (y < 0 || y >= a) throw std::invalid_argument("bc_loss: action " + std::to_string(y) + " out of range");
      for (int c = 0; c < a; ++c) target[i * a + c] = c == y ? on : off;
    }
    Tensor<T> q({b, l, a}, std::move(target));
    return scale(sum(mul(log_softmax(outputs), q)), T(-1.0 / static_cast<double>(count)));
  }
  if (seg.action_values.size() != tokens * a) throw ShapeError("bc_loss: continuous targets missing or mis-sized");
  std::vector<T> keep(tokens * a, T(0));
  for (std::size_t i = 0; i < tokens; ++i)
    for (int c = 0; c < a; ++c) {
      keep[i * a + c] = seg.valid[i] ? T(1) : T(0);
      target[i * a + c] = seg.valid[i] ? seg.action_values[i * a + c] : T(0);
    }
  Tensor<T> diff = mul(sub(outputs, Tensor<T>({b, l, a}, std::move(target))), Tensor<T>({b, l, a}, std::move(keep)));
  return scale(sum(mul(diff, diff)), T(1.0 / static_cast<double>(count * a)));
}

template <typename T>
AdamState<T> adam_init(const ParamList<T>& params) {
  AdamState<T> s;
  for (const auto& [name, p] : params) {
    s.m.emplace_back(p.numel(), T(0));
    s.v.emplace_back(p.numel(), T(0));
  }
  return s;
}

template <typename T>
bool adam_step(ParamList<T>& params, AdamState<T>& s, const TrainConfig& cfg, double lr) {
  for (auto& [name, p] : params)
    if (p.has_grad())
      for (T g : p.grad())
        if (!std::isfinite(static_cast<double>(g))) return false;
  ++s.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = params[k].second;
    auto w = p.data();
    auto g = p.has_grad() ? p.grad() : std::span<const T>();
    auto& m = s.m[k];
    auto& v = s.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1 - cfg.beta1) * gi);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi);
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
      w[i] = static_cast<T>(w[i] - lr * (update + cfg.weight_decay * w[i]));
    }
  }
  return true;
}

double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t total_steps) {
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
  if (!cfg.cosine_decay || total_steps <= cfg.warmup_steps) return cfg.lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total_steps - cfg.warmup_steps));
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return cfg.lr * (cfg.lr_end_factor + (1.0 - cfg.lr_end_factor) * cosine);
}

template <typename T>
double clip_gradients(ParamList<T>& params, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_gradients: max_norm must be > 0");
  double sq = 0;
  for (auto& [name, p] : params)
    if (p.has_grad())
      for (T g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : params)
      if (p.has_grad())
        for (T& g : p.grad_data()) g *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------

template <typename T>
Trainer<T>::Trainer(const RunConfig& cfg, std::vector<Trajectory> data) : cfg_(cfg), data_(std::move(data)) {
  cfg_.validate();
  if (data_.empty()) throw std::invalid_argument("train: empty dataset");
  params_ = init_params<T>(cfg_.model, derive_seed(cfg_.train.seed, "model"));
  named_ = params_.named_parameters();
  adam_ = adam_init(named_);
  rng_ = Rng(derive_seed(cfg_.train.seed, "dropout"));
  batches_per_epoch_ = static_cast<int>((data_.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size);
  total_steps_ = static_cast<std::int64_t>(cfg_.train.epochs) * batches_per_epoch_;
  if (cfg_.train.max_steps > 0) total_steps_ = std::min<std::int64_t>(total_steps_, cfg_.train.max_steps);
}

template <typename T>
std::vector<std::size_t> Trainer<T>::epoch_order(int epoch) const {
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 g(derive_seed(cfg_.train.seed, "shuffle", epoch));
  std::shuffle(order.begin(), order.end(), g);
  return order;
}

template <typename T>
TrainLogRow Trainer<T>::step() {
  if (done()) throw std::logic_error("train: already finished");
  const auto start = std::chrono::steady_clock::now();
  TrainLogRow row;
  row.epoch = static_cast<int>(step_ / batches_per_epoch_);
  const int within = static_cast<int>(step_ % batches_per_epoch_);
  const auto order = epoch_order(row.epoch);
  const std::size_t bs = cfg_.train.batch_size;
  std::vector<const Trajectory*> picked;
  for (std::size_t i = within * bs; i < std::min(order.size(), (within + 1) * bs); ++i) picked.push_back(&data_[order[i]]);
  EpisodeBatch batch = make_batch(std::span<const Trajectory* const>(picked));

  std::vector<std::uint64_t> row_seeds;
  for (std::size_t r = 0; r < picked.size(); ++r)
    row_seeds.push_back(derive_seed(cfg_.train.seed, "train-memory", static_cast<std::uint64_t>(step_) * bs + r));

  for (auto& [name, p] : named_) p.zero_grad();
  RunContext ctx;
  ctx.train = true;
  ctx.rng = &rng_;
  Tensor<T> loss;
  try {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    forward_trajectory<T>(batch, params_, cfg_.model, ctx, init_states<T>(cfg_.model, row_seeds),
                          [&](int, const Segment<T>& seg, const Tensor<T>& out) {
                            Tensor<T> l = bc_loss(out, seg, cfg_.model.action_space, cfg_.train.label_smoothing);
                            loss = loss.defined() ? add(loss, l) : l;
                          });
    tape.backward(loss);
  } catch (const NumericError& e) {
    throw NumericError("train: non-finite value at step " + std::to_string(step_) + " (epoch " +
                       std::to_string(row.epoch) + "): " + e.what());
  }
  row.loss = static_cast<double>(loss.item());
  row.grad_norm = clip_gradients(named_, cfg_.train.grad_clip);
  row.lr = lr_schedule(step_ + 1, cfg_.train, total_steps_);
  row.skipped = !adam_step(named_, adam_, cfg_.train, row.lr);
  ++step_;
  row.step = step_;
  wall_offset_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  row.wall_time = wall_offset_;

  if (!log_path_.empty()) {
    const bool fresh = !std::filesystem::exists(log_path_) || std::filesystem::file_size(log_path_) == 0;
    std::ofstream f(log_path_, std::ios::app);
    if (fresh) f << "step,epoch,loss,lr,grad_norm,wall_time\n";
    f.precision(9);
    f << row.step << ',' << row.epoch << ',' << row.loss << ',' << row.lr << ',' << row.grad_norm << ','
      << row.wall_time << '\n';
  }
  return row;
}

template <typename T>
std::vector<TrainLogRow> Trainer<T>::run(std::int64_t max_steps, const std::function<void(const TrainLogRow&)>& on_step) {
  std::vector<TrainLogRow> rows;
  for (std::int64_t i = 0; !done() && (max_steps < 0 || i < max_steps); ++i) {
    rows.push_back(step());
    if (on_step) on_step(rows.back());
  }
  return rows;
}

template <typename T>
void Trainer<T>::set_log_path(const std::string& path) {
  log_path_ = path;
}

// Checkpoint layout:
//   8 bytes  magic "ELMURCKP"
//   4 bytes  format version (uint32, little endian)
//   8 bytes  manifest length n (uint64)
//   n bytes  manifest: JSON text with the run config, step, RNG state and a
//            table of tensors {group, name, shape, offset, count}
//   payload  raw values of every tensor in manifest order, float32 or float64
//            per the manifest's "precision"
namespace {

constexpr char kMagic[8] = {'E', 'L', 'M', 'U', 'R', 'C', 'K', 'P'};

struct RawCheckpoint {
  nlohmann::json manifest;
  std::vector<char> payload;
};

RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t n = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&n), 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("checkpoint: " + path + " is not a checkpoint");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  std::string text(n, '\0');
  f.read(text.data(), static_cast<std::streamsize>(n));
  RawCheckpoint c;
  c.manifest = nlohmann::json::parse(text);
  c.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  return c;
}

template <typename T>
void copy_tensor(const RawCheckpoint& c, const nlohmann::json& entry, std::span<T> dst) {
  const int bits = c.manifest.at("precision").get<int>();
  const std::size_t offset = entry.at("offset").get<std::size_t>(), count = entry.at("count").get<std::size_t>();
  if (count != dst.size())
    throw std::runtime_error("checkpoint: tensor " + entry.at("name").get<std::string>() + " has " +
                             std::to_string(count) + " values, expected " + std::to_string(dst.size()));
  const std::size_t width = bits / 8;
  if ((offset + count) * width > c.payload.size()) throw std::runtime_error("checkpoint: payload truncated");
  const char* src = c.payload.data() + offset * width;
  for (std::size_t i = 0; i < count; ++i) {
    if (bits == 32) {
      float v;
      std::memcpy(&v, src + i * 4, 4);
      dst[i] = static_cast<T>(v);
    } else {
      double v;
      std::memcpy(&v, src + i * 8, 8);
      dst[i] = static_cast<T>(v);
    }
  }
}

RunConfig manifest_config(const nlohmann::json& m) { return config_parse(m.at("config").get<std::string>()); }

}  // namespace

template <typename T>
void Trainer<T>::save(const std::string& path) const {
  nlohmann::json m;
  m["format_version"] = kCheckpointVersion;
  m["precision"] = static_cast<int>(sizeof(T) * 8);
  m["step"] = step_;
  m["adam_step"] = adam_.step;
  m["wall_time"] = wall_offset_;
  m["rng"] = rng_.save_state();
  m["config"] = config_dump(cfg_);
  nlohmann::json table = nlohmann::json::array();
  std::vector<const T*> blocks;
  std::vector<std::size_t> sizes;
  std::size_t offset = 0;
  auto add = [&](const std::string& group, const std::string& name, const Shape& shape, const T* data, std::size_t n) {
    table.push_back({{"group", group}, {"name", name}, {"shape", shape}, {"offset", offset}, {"count", n}});
    blocks.push_back(data);
    sizes.push_back(n);
    offset += n;
  };
  for (std::size_t k = 0; k < named_.size(); ++k)
    add("param", named_[k].first, named_[k].second.shape(), named_[k].second.values().data(), named_[k].second.numel());
  for (std::size_t k = 0; k < named_.size(); ++k)
    add("adam_m", named_[k].first, named_[k].second.shape(), adam_.m[k].data(), adam_.m[k].size());
  for (std::size_t k = 0; k < named_.size(); ++k)
    add("adam_v", named_[k].first, named_[k].second.shape(), adam_.v[k].data(), adam_.v[k].size());
  m["tensors"] = table;

  const std::string text = m.dump(1);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + tmp);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t n = text.size();
    f.write(kMagic, 8);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(text.data(), static_cast<std::streamsize>(n));
    for (std::size_t i = 0; i < blocks.size(); ++i)
      f.write(reinterpret_cast<const char*>(blocks[i]), static_cast<std::streamsize>(sizes[i] * sizeof(T)));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void Trainer<T>::load(const std::string& path) {
  RawCheckpoint c = read_checkpoint(path);
  if (c.manifest.at("precision").get<int>() != static_cast<int>(sizeof(T) * 8))
    throw std::runtime_error("checkpoint: precision differs from the trainer's; resume needs equal precision");
  RunConfig saved = manifest_config(c.manifest);
  for (const auto& f : config_fields())
    if (f.section == "model" && f.get(saved) != f.get(cfg_))
      throw std::runtime_error("checkpoint: model config differs at " + f.name() + " (" + f.get(saved) + " vs " +
                               f.get(cfg_) + ")");
  std::size_t k_param = 0, k_m = 0, k_v = 0;
  for (const auto& e : c.manifest.at("tensors")) {
    const std::string group = e.at("group").get<std::string>();
    if (group == "param") {
      if (k_param >= named_.size() || e.at("name").get<std::string>() != named_[k_param].first)
        throw std::runtime_error("checkpoint: parameter list differs from the model");
      copy_tensor<T>(c, e, named_[k_param++].second.data());
    } else if (group == "adam_m") {
      copy_tensor<T>(c, e, std::span<T>(adam_.m.at(k_m++)));
    } else if (group == "adam_v") {
      copy_tensor<T>(c, e, std::span<T>(adam_.v.at(k_v++)));
    }
  }
  if (k_param != named_.size() || k_m != named_.size() || k_v != named_.size())
    throw std::runtime_error("checkpoint: tensor count differs from the model");
  step_ = c.manifest.at("step").get<std::int64_t>();
  adam_.step = c.manifest.at("adam_step").get<std::int64_t>();
  wall_offset_ = c.manifest.at("wall_time").get<double>();
  rng_.load_state(c.manifest.at("rng").get<std::string>());
}

template <typename T>
ModelParams<T> load_params(const std::string& path, RunConfig* cfg_out) {
  RawCheckpoint c = read_checkpoint(path);
  RunConfig cfg = manifest_config(c.manifest);
  ModelParams<T> p = init_params<T>(cfg.model, 0);
  ParamList<T> named = p.named_parameters();
  std::size_t k = 0;
  for (const auto& e : c.manifest.at("tensors")) {
    if (e.at("group").get<std::string>() != "param") continue;
    if (k >= named.size() || e.at("name").get<std::string>() != named[k].first)
      throw std::runtime_error("checkpoint: parameter list differs from its config");
    copy_tensor<T>(c, e, named[k++].second.data());
  }
  if (k != named.size()) throw std::runtime_error("checkpoint: missing parameters");
  if (cfg_out) *cfg_out = cfg;
  return p;
}

// ---------------------------------------------------------------------------

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.obs_dim = 3;
  c.action_dim = 3;
  c.d_model = 8;
  c.heads = 2;
  c.n_layers = 2;
  c.context_length = 4;
  c.max_distance = 8;
  c.memory_slots = 2;
  c.lru_blend = 0.3;
  c.memory_init_std = 0.1;
  c.ffn_kind = FfnKind::Moe;
  c.moe = {3, 1, 2, 8, 8};
  c.dropout = c.attn_dropout = c.memory_dropout = 0.0;
  return c;
}

GradcheckReport model_gradcheck(const ModelConfig& cfg, int length, std::uint64_t seed, double step) {
  cfg.validate();
  if (length < 2) throw std::invalid_argument("gradcheck: need length >= 2");
  ModelParams<double> params = init_params<double>(cfg, seed);
  ParamList<double> named = params.named_parameters();
  Rng rng(derive_seed(seed, "gradcheck"));
  // Nonzero bias tables so their gradients are exercised away from the origin.
  for (auto& [name, t] : named)
    if (name.find("positions") != std::string::npos || name.find("memory_bias") != std::string::npos)
      for (double& v : t.data()) v = rng.normal(0.0, 0.3);

  std::vector<Trajectory> eps;
  for (int r = 0; r < 2; ++r) {
    Trajectory t;
    t.obs_dim = cfg.obs_dim;
    const int len = length - r;  // second row is ragged
    for (int i = 0; i < len * cfg.obs_dim; ++i) t.obs.push_back(rng.normal(0.0, 1.0));
    for (int i = 0; i < len; ++i) {
      if (cfg.action_space == ActionSpace::Discrete) {
        t.actions.push_back(rng.uniform_int(0, cfg.action_dim - 1));
      } else {
        t.actions.push_back(0);
        for (int c = 0; c < cfg.action_dim; ++c) t.action_values.push_back(rng.normal(0.0, 1.0));
      }
    }
    eps.push_back(std::move(t));
  }
  EpisodeBatch batch = make_batch(eps);
  const std::vector<std::uint64_t> row_seeds{derive_seed(seed, "mem", 0), derive_seed(seed, "mem", 1)};
  const double smoothing = 0.1;
  const int segments = segment_count(batch.max_length, cfg.context_length);

  RoutingLog routing;
  RunContext ctx;
  ctx.routing = &routing;

  // Analytic pass; also records routing and each segment's incoming memory.
  std::vector<LayerStates<double>> incoming;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> total;
    LayerStates<double> states = init_states<double>(cfg, row_seeds);
    for (int i = 0; i < segments; ++i) {
      if (cfg.memory_gradient == MemoryGradient::Detach)
        for (auto& s : states) s = s.detached();
      incoming.push_back(states);
      for (auto& s : incoming.back()) s = s.detached();
      Segment<double> seg = segment_at<double>(batch, i, cfg.context_length);
      auto out = forward_segment(seg, states, params, cfg, ctx);
      Tensor<double> l = bc_loss(out.outputs, seg, cfg.action_space, smoothing);
      total = total.defined() ? add(total, l) : l;
      states = out.states;
    }
    tape.backward(total);
  }
  routing.mode = RoutingLog::Mode::Replay;

  auto loss_at = [&]() {
    routing.cursor = 0;
    double total = 0;
    LayerStates<double> states = init_states<double>(cfg, row_seeds);
    for (int i = 0; i < segments; ++i) {
      if (cfg.memory_gradient == MemoryGradient::Detach) states = incoming[i];
      Segment<double> seg = segment_at<double>(batch, i, cfg.context_length);
      auto out = forward_segment(seg, states, params, cfg, ctx);
      total += bc_loss(out.outputs, seg, cfg.action_space, smoothing).item();
      states = out.states;
    }
    return total;
  };

  GradcheckReport rep;
  for (auto& [name, t] : named) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto w = t.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + step;
      const double up = loss_at();
      w[i] = saved - step;
      const double down = loss_at();
      w[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      const double err = std::abs(numeric - analytic[i]) / denom;
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

#define ELMUR_INSTANTIATE_TRAINING(T)                                                                      \
  template Tensor<T> bc_loss<T>(const Tensor<T>&, const Segment<T>&, ActionSpace, double);                  \
  template AdamState<T> adam_init<T>(const ParamList<T>&);                                                 \
  template bool adam_step<T>(ParamList<T>&, AdamState<T>&, const TrainConfig&, double);                    \
  template double clip_gradients<T>(ParamList<T>&, double);                                                \
  template class Trainer<T>;                                                                               \
  template ModelParams<T> load_params<T>(const std::string&, RunConfig*);

ELMUR_INSTANTIATE_TRAINING(float)
ELMUR_INSTANTIATE_TRAINING(double)

}  // namespace elmur
