#include "elmur/eval.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "elmur/tasks.hpp"
#include "elmur/training.hpp"
#include "json.hpp"

namespace elmur {

template <typename T>
std::vector<int> greedy_actions(std::span<const T> logits, int tokens, int actions) {
  std::vector<int> out(tokens);
  for (int i = 0; i < tokens; ++i) {
    const T* row = logits.data() + static_cast<std::size_t>(i) * actions;
    out[i] = static_cast<int>(std::max_element(row, row + actions) - row);
  }
  return out;
}

template <typename T>
Policy model_policy(const ModelParams<T>& params, const ModelConfig& cfg) {
  return [params, cfg](const std::vector<Trajectory>& episodes) {
    NoGradScope<T> off;
    EpisodeBatch batch = make_batch(episodes);
    std::vector<std::uint64_t> seeds;
    for (const auto& e : episodes) seeds.push_back(derive_seed(e.seed, "eval-memory"));
    std::vector<std::vector<int>> pred(episodes.size());
    RunContext ctx;
    forward_trajectory<T>(batch, params, cfg, ctx, init_states<T>(cfg, seeds),
                          [&](int, const Segment<T>& seg, const Tensor<T>& out) {
                            const int l = seg.length(), a = out.dim(-1);
                            auto all = greedy_actions<T>(out.values(), seg.batch() * l, a);
                            for (int r = 0; r < seg.batch(); ++r)
                              for (int i = 0; i < l; ++i)
                                if (seg.valid[static_cast<std::size_t>(r) * l + i])
                                  pred[r].push_back(all[static_cast<std::size_t>(r) * l + i]);
                          });
    return pred;
  };
}

Policy oracle_policy() {
  return [](const std::vector<Trajectory>& episodes) {
    std::vector<std::vector<int>> out;
    for (const auto& e : episodes) out.push_back(e.actions);
    return out;
  };
}

void fit_model_to_task(RunConfig& cfg) {
  if (cfg.task.name == "tmaze") {
    cfg.model.obs_dim = kTMazeObsDim;
    cfg.model.action_dim = kTMazeActions;
  } else if (cfg.task.name == "recall") {
    cfg.model.obs_dim = cfg.task.alphabet;
    cfg.model.action_dim = cfg.task.alphabet + 1;
  } else if (cfg.task.name == "repeat_first") {
    cfg.model.obs_dim = cfg.task.alphabet;
    cfg.model.action_dim = cfg.task.alphabet;
  } else {
    throw std::invalid_argument("unknown task '" + cfg.task.name + "'");
  }
  cfg.model.action_space = ActionSpace::Discrete;
}

Trajectory task_episode(const TaskConfig& task, int length, std::uint64_t seed) {
  if (task.name == "tmaze") return tmaze_generate({length, 0}, seed);
  if (task.name == "repeat_first") return repeat_first_generate({task.alphabet, length}, seed);
  if (task.name == "recall") return recall_generate({task.alphabet, length, task.segments}, seed);
  throw std::invalid_argument("unknown task '" + task.name + "'");
}

bool task_success(const TaskConfig& task, const Trajectory& t, std::span<const int> predicted) {
  if (task.name == "tmaze") return tmaze_success(t, predicted);
  if (task.name == "repeat_first") return repeat_first_success(t, predicted);
  if (task.name == "recall") return recall_success(t, predicted);
  throw std::invalid_argument("unknown task '" + task.name + "'");
}

std::vector<Trajectory> task_dataset(const TaskConfig& task, std::uint64_t seed) {
  if (task.name == "tmaze") return tmaze_dataset(task.train_lengths, task.episodes, seed);
  std::vector<Trajectory> out;
  for (int i = 0; i < task.episodes; ++i) {
    const std::uint64_t s = derive_seed(seed, task.name, i);
    Rng pick(derive_seed(s, "length"));
    const int len = task.train_lengths[pick.uniform_int(0, static_cast<int>(task.train_lengths.size()) - 1)];
    out.push_back(task_episode(task, len, s));
  }
  return out;
}

SuccessCount evaluate_length(const Policy& policy, const TaskConfig& task, int length, int episodes, std::uint64_t seed,
                             int batch, int workers) {
  const std::uint64_t base = derive_seed(derive_seed(seed, "eval-" + task.name), "length", length);
  const int chunks = (episodes + batch - 1) / batch;
  std::atomic<int> next{0}, wins{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (int c = next++; c < chunks; c = next++) {
      try {
        std::vector<Trajectory> eps;
        for (int i = c * batch; i < std::min(episodes, (c + 1) * batch); ++i)
          eps.push_back(task_episode(task, length, derive_seed(base, "episode", i)));
        auto pred = policy(eps);
        int w = 0;
        for (std::size_t i = 0; i < eps.size(); ++i) w += task_success(task, eps[i], pred.at(i));
        wins += w;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min(workers, chunks));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return {wins.load(), episodes};
}

MeanSem sem(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("sem: no values");
  MeanSem r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.sem = std::sqrt(ss / static_cast<double>(values.size() - 1)) / std::sqrt(static_cast<double>(values.size()));
  }
  return r;
}

EvalReport rollout_eval(const std::vector<Policy>& runs, const TaskConfig& task, const std::vector<int>& lengths,
                        int episodes, std::uint64_t seed, int batch, int workers) {
  if (runs.empty()) throw std::invalid_argument("rollout_eval: no runs");
  EvalReport rep;
  std::vector<double> run_means(runs.size(), 0.0);
  std::ostringstream fp;
  fp << task.name << ':' << episodes << ':' << seed;
  for (int len : lengths) {
    LengthResult lr;
    lr.length = len;
    lr.episodes_per_run = episodes;
    for (std::size_t r = 0; r < runs.size(); ++r) {
      const double rate = evaluate_length(runs[r], task, len, episodes, seed, batch, workers).rate();
      lr.run_success.push_back(rate);
      run_means[r] += rate / static_cast<double>(lengths.size());
    }
    lr.stats = sem(lr.run_success);
    rep.lengths.push_back(lr);
    fp << ':' << len;
  }
  if (!lengths.empty()) rep.grand = sem(run_means);
  rep.fingerprint = fp.str();
  return rep;
}

void write_sweep_csv(const std::string& path, const EvalReport& report) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "length,success,sem\n";
  f.precision(6);
  for (const auto& l : report.lengths) f << l.length << ',' << l.stats.mean << ',' << l.stats.sem << '\n';
}

EvalReport extrapolation_sweep(const std::vector<Policy>& runs, const TaskConfig& task, const std::vector<int>& grid,
                               int episodes, std::uint64_t seed, const std::string& csv_path, int batch, int workers) {
  EvalReport rep = rollout_eval(runs, task, grid, episodes, seed, batch, workers);
  if (!csv_path.empty()) write_sweep_csv(csv_path, rep);
  return rep;
}

TrainedRun train_run(const RunConfig& cfg0, const std::function<void(const std::string&)>& log) {
  RunConfig cfg = cfg0;
  fit_model_to_task(cfg);
  const auto start = std::chrono::steady_clock::now();
  Trainer<float> trainer(cfg, task_dataset(cfg.task, derive_seed(cfg.train.seed, "data")));
  double last = 0;
  trainer.run(-1, [&](const TrainLogRow& row) {
    last = row.loss;
    if (log && (row.step % 100 == 0 || row.step == trainer.total_steps()))
      log("step " + std::to_string(row.step) + "/" + std::to_string(trainer.total_steps()) +
          " loss " + std::to_string(row.loss));
  });
  TrainedRun out{trainer.params(), cfg.model, last,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
  return out;
}

std::vector<MatrixCell> generalization_matrix(const RunConfig& base, const std::vector<int>& train_lengths,
                                              const std::vector<int>& val_lengths, int runs,
                                              const std::string& csv_path,
                                              const std::function<void(const std::string&)>& log) {
  std::vector<MatrixCell> cells;
  for (int tl : train_lengths) {
    std::vector<Policy> policies;
    for (int r = 0; r < runs; ++r) {
      RunConfig cfg = base;
      cfg.task.train_lengths.clear();
      for (int l = 1; l <= tl; ++l) cfg.task.train_lengths.push_back(l);
      cfg.model.context_length = (tl + 1 + 2) / 3;
      cfg.train.seed = derive_seed(base.train.seed, "matrix-run", static_cast<std::uint64_t>(tl) * 1000 + r);
      if (log) log("matrix: train length " + std::to_string(tl) + ", run " + std::to_string(r));
      TrainedRun run = train_run(cfg, log);
      policies.push_back(model_policy(run.params, run.model));
    }
    EvalReport rep = rollout_eval(policies, base.task, val_lengths, base.eval.episodes,
                                  derive_seed(base.train.seed, "matrix-eval"), base.eval.batch, base.workers);
    for (const auto& l : rep.lengths) cells.push_back({tl, l.length, l.stats, l.run_success});
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    if (!f) throw std::runtime_error("cannot write " + csv_path);
    f << "train_len,val_len,success,sem\n";
    for (const auto& c : cells) f << c.train_length << ',' << c.val_length << ',' << c.stats.mean << ',' << c.stats.sem << '\n';
  }
  return cells;
}

RunConfig apply_variant(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  auto value = [&](const std::string& prefix) { return variant.substr(prefix.size()); };
  auto number = [&](const std::string& prefix) {
    const std::string v = value(prefix);
    std::size_t used = 0;
    double d = 0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw std::invalid_argument("ablation: bad value in variant '" + variant + "'");
    return d;
  };
  if (variant == "baseline") {
  } else if (variant == "shared_memory") {
    c.model.shared_memory = true;
  } else if (variant == "no_rel_bias") {
    c.model.rel_bias = false;
  } else if (variant == "no_lru") {
    c.model.lru = false;
  } else if (variant == "no_rel_bias_no_lru") {
    c.model.rel_bias = false;
    c.model.lru = false;
  } else if (variant == "moe_to_mlp") {
    c.model.ffn_kind = FfnKind::Mlp;
  } else if (variant.rfind("lambda=", 0) == 0) {
    c.model.lru_blend = number("lambda=");
  } else if (variant.rfind("sigma=", 0) == 0) {
    c.model.memory_init_std = number("sigma=");
  } else if (variant.rfind("slots=", 0) == 0) {
    c.model.memory_slots = static_cast<int>(number("slots="));
  } else if (variant.rfind("segments=", 0) == 0) {
    const std::string v = value("segments=");
    const auto x = v.find('x');
    if (x == std::string::npos) throw std::invalid_argument("ablation: segments variant needs <L>x<S>");
    int l = 0, s = 0;
    try {
      l = std::stoi(v.substr(0, x));
      s = std::stoi(v.substr(x + 1));
    } catch (const std::exception&) {
      throw std::invalid_argument("ablation: bad segments variant '" + variant + "'");
    }
    if (l < 1 || s < 1) throw std::invalid_argument("ablation: segments variant needs positive L and S");
    c.model.context_length = l;
    if (c.task.name == "recall") {
      if (s < 2) throw std::invalid_argument("ablation: recall needs at least 2 segments");
      c.task.segments = s;
      c.task.train_lengths = {l};
    } else {
      c.task.train_lengths = {l * s};
    }
  } else {
    throw std::invalid_argument("ablation: unknown variant '" + variant + "'");
  }
  c.model.validate();
  return c;
}

std::vector<AblationRow> ablation_run(const RunConfig& base, const std::vector<std::string>& variants, int runs,
                                      const std::string& csv_path,
                                      const std::function<void(const std::string&)>& log) {
  std::vector<RunConfig> configs;
  for (const auto& v : variants) configs.push_back(apply_variant(base, v));  // reject unknown names up front
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < variants.size(); ++k) {
    AblationRow row;
    row.variant = variants[k];
    for (int r = 0; r < runs; ++r) {
      RunConfig cfg = configs[k];
      cfg.train.seed = derive_seed(base.train.seed, "ablation-run", r);
      if (log) log("ablation: " + variants[k] + ", run " + std::to_string(r));
      TrainedRun run = train_run(cfg, log);
      const int len = cfg.task.train_lengths.front();
      row.run_success.push_back(evaluate_length(model_policy(run.params, run.model), cfg.task, len,
                                                base.eval.episodes, derive_seed(cfg.train.seed, "ablation-eval"),
                                                base.eval.batch, base.workers)
                                    .rate());
    }
    row.stats = sem(row.run_success);
    rows.push_back(row);
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    if (!f) throw std::runtime_error("cannot write " + csv_path);
    f << "variant,mean,sem,n_runs\n";
    for (const auto& r : rows) f << r.variant << ',' << r.stats.mean << ',' << r.stats.sem << ',' << r.run_success.size() << '\n';
  }
  return rows;
}

namespace {

std::uint64_t fnv(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t h) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

}  // namespace

template <typename T>
std::string parameter_fingerprint(const ModelParams<T>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : params.named_parameters()) h = fnv(t.values().data(), t.numel() * sizeof(T), h);
  return hex(h);
}

void write_run_summary(const std::string& path, const std::string& command, const RunConfig& cfg,
                       const std::vector<std::string>& artifacts, double wall_seconds, const std::string& extra_json) {
  std::uint64_t h = 1469598103934665603ULL;
  nlohmann::json files = nlohmann::json::array();
  for (const auto& a : artifacts) {
    std::ifstream f(a, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    h = fnv(bytes.data(), bytes.size(), h);
    files.push_back({{"path", a}, {"hash", hex(fnv(bytes.data(), bytes.size()))}});
  }
  nlohmann::json j{{"command", command},
                   {"config_fingerprint", config_fingerprint(cfg)},
                   {"config", config_dump(cfg)},
                   {"seed", cfg.train.seed},
                   {"precision", cfg.precision},
                   {"artifacts", files},
                   {"artifact_hash", hex(h)},
                   {"wall_time", wall_seconds},
                   {"details", nlohmann::json::parse(extra_json)}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << '\n';
}

template std::vector<int> greedy_actions<float>(std::span<const float>, int, int);
template std::vector<int> greedy_actions<double>(std::span<const double>, int, int);
template Policy model_policy<float>(const ModelParams<float>&, const ModelConfig&);
template Policy model_policy<double>(const ModelParams<double>&, const ModelConfig&);
template std::string parameter_fingerprint<float>(const ModelParams<float>&);
template std::string parameter_fingerprint<double>(const ModelParams<double>&);

}  // namespace elmur
