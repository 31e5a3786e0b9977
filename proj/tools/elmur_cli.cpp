#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "elmur/config.hpp"
#include "elmur/eval.hpp"
#include "elmur/memory_theory.hpp"
#include "elmur/tasks.hpp"
#include "elmur/training.hpp"
#include "json.hpp"

using namespace elmur;
namespace fs = std::filesystem;

namespace {

// Raised when a named check fails; exits with status 1.
struct AssertionFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "runs/latest";
  int precision = 0;
  int workers = 0;
  std::vector<std::string> sets;
  std::map<std::string, std::string> keys;  // per-key flags

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig cfg = config_path.empty() ? base : config_load(config_path, base);
    for (const auto& [name, value] : keys) config_set(cfg, name, value);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      config_set(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed_set) cfg.train.seed = seed;
    if (precision) cfg.precision = precision;
    if (workers) cfg.workers = workers;
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_keys = true) {
  cmd->add_option("--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>("--seed", [&c](std::uint64_t s) {
    c.seed = s;
    c.seed_set = true;
  }, "root seed (train.seed)");
  cmd->add_option("--out", c.out, "run directory")->capture_default_str();
  cmd->add_option("--precision", c.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  cmd->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--set", c.sets, "override section.key=value (repeatable)");
  if (!with_keys) return;
  for (const auto& f : config_fields()) {
    const std::string name = f.name();
    cmd->add_option_function<std::string>("--" + name, [&c, name](const std::string& v) { c.keys[name] = v; },
                                          f.help + " (default " + f.get(RunConfig{}) + ")")
        ->group("Config keys");
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_config(const fs::path& dir, const RunConfig& cfg) {
  std::ofstream f(dir / "config.ini");
  f << config_dump(cfg, true);
}

template <typename T>
Policy load_policy(const std::string& path, RunConfig* cfg) {
  auto params = load_params<T>(path, cfg);
  return model_policy(params, cfg->model);
}

Policy load_any_policy(const std::string& path, RunConfig* cfg) {
  try {
    return load_policy<float>(path, cfg);
  } catch (const std::runtime_error& e) {
    if (std::string(e.what()).find("precision") == std::string::npos) throw;
    return load_policy<double>(path, cfg);
  }
}

int cmd_generate(const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = c.resolve();
  fit_model_to_task(cfg);
  fs::create_directories(c.out);
  const auto data = task_dataset(cfg.task, derive_seed(cfg.train.seed, "data"));
  const auto path = (fs::path(c.out) / "dataset.jsonl").string();
  dataset_write(path, data, cfg.model.obs_dim, cfg.model.action_dim);
  write_config(c.out, cfg);
  write_run_summary((fs::path(c.out) / "summary.json").string(), "generate", cfg, {path}, seconds_since(t0),
                    nlohmann::json{{"episodes", data.size()}}.dump());
  std::cout << "wrote " << data.size() << " episodes to " << path << '\n';
  return 0;
}

template <typename T>
int run_train(const Common& c, RunConfig cfg, const std::string& data_path, std::int64_t max_steps,
              const std::string& resume) {
  const auto t0 = std::chrono::steady_clock::now();
  fit_model_to_task(cfg);
  std::vector<Trajectory> data;
  if (!data_path.empty()) {
    auto d = dataset_read(data_path);
    if (d.obs_dim != cfg.model.obs_dim || d.n_actions != cfg.model.action_dim)
      throw std::runtime_error("dataset " + data_path + " does not match the task's observation/action sizes");
    data = std::move(d.episodes);
  } else {
    data = task_dataset(cfg.task, derive_seed(cfg.train.seed, "data"));
  }
  fs::create_directories(c.out);
  const fs::path dir(c.out);
  Trainer<T> trainer(cfg, std::move(data));
  if (!resume.empty()) trainer.load(resume);
  trainer.set_log_path((dir / "train_log.csv").string());
  double last = 0;
  const auto total = trainer.total_steps();
  trainer.run(max_steps, [&](const TrainLogRow& row) {
    last = row.loss;
    if (row.step % 50 == 0 || row.step == total)
      std::cout << "step " << row.step << "/" << total << " loss " << row.loss << " lr " << row.lr << std::endl;
  });
  const auto ckpt = (dir / "checkpoint.ckpt").string();
  trainer.save(ckpt);
  write_config(dir, cfg);
  write_run_summary((dir / "summary.json").string(), "train", cfg, {ckpt, (dir / "train_log.csv").string()},
                    seconds_since(t0),
                    nlohmann::json{{"steps", trainer.steps_taken()},
                                   {"final_loss", last},
                                   {"parameters", count_parameters(trainer.params())},
                                   {"parameter_fingerprint", parameter_fingerprint(trainer.params())}}
                        .dump());
  std::cout << "checkpoint " << ckpt << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::vector<int> lengths, int episodes, double min_success) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  Policy policy = load_any_policy(checkpoint, &cfg);
  RunConfig run = c.resolve(cfg);
  if (lengths.empty()) lengths = run.eval.lengths;
  if (episodes <= 0) episodes = run.eval.episodes;
  fs::create_directories(c.out);
  const auto csv = (fs::path(c.out) / "eval.csv").string();
  auto rep = extrapolation_sweep({policy}, run.task, lengths, episodes, derive_seed(run.train.seed, "eval"), csv,
                                 run.eval.batch, run.workers);
  nlohmann::json details = nlohmann::json::array();
  bool ok = true;
  for (const auto& l : rep.lengths) {
    std::cout << "length " << l.length << " success " << l.stats.mean << '\n';
    details.push_back({{"length", l.length}, {"success", l.stats.mean}});
    ok &= l.stats.mean >= min_success;
  }
  write_run_summary((fs::path(c.out) / "summary.json").string(), "eval", run, {checkpoint, csv}, seconds_since(t0),
                    nlohmann::json{{"checkpoint", checkpoint}, {"episodes", episodes}, {"results", details}}.dump());
  if (!ok) throw AssertionFailed("success below --min-success " + std::to_string(min_success));
  return 0;
}

int cmd_sweep(const Common& c, const std::string& kind, const std::vector<std::string>& checkpoints,
              std::vector<int> grid, const std::vector<std::string>& variants, std::vector<int> matrix_train,
              std::vector<int> matrix_val, int runs) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(c.out);
  const fs::path dir(c.out);
  auto log = [](const std::string& s) { std::cout << s << std::endl; };
  if (kind == "extrapolation") {
    if (checkpoints.empty()) throw std::runtime_error("sweep extrapolation needs --checkpoint");
    RunConfig saved;
    std::vector<Policy> policies;
    for (const auto& p : checkpoints) policies.push_back(load_any_policy(p, &saved));
    RunConfig cfg = c.resolve(saved);
    if (grid.empty()) grid = cfg.eval.lengths;
    const auto csv = (dir / "sweep.csv").string();
    auto rep = extrapolation_sweep(policies, cfg.task, grid, cfg.eval.episodes, derive_seed(cfg.train.seed, "eval"), csv,
                                   cfg.eval.batch, cfg.workers);
    for (const auto& l : rep.lengths) std::cout << l.length << ' ' << l.stats.mean << " +- " << l.stats.sem << '\n';
    auto arts = checkpoints;
    arts.push_back(csv);
    write_run_summary((dir / "summary.json").string(), "sweep extrapolation", cfg, arts, seconds_since(t0),
                      nlohmann::json{{"grid", grid}}.dump());
    return 0;
  }
  RunConfig cfg = c.resolve();
  if (runs <= 0) runs = cfg.eval.runs;
  if (kind == "ablation") {
    const auto csv = (dir / "ablation.csv").string();
    auto rows = ablation_run(cfg, variants.empty() ? std::vector<std::string>{"baseline"} : variants, runs, csv, log);
    for (const auto& r : rows) std::cout << r.variant << ' ' << r.stats.mean << " +- " << r.stats.sem << '\n';
    write_run_summary((dir / "summary.json").string(), "sweep ablation", cfg, {csv}, seconds_since(t0),
                      nlohmann::json{{"variants", variants}, {"runs", runs}}.dump());
    return 0;
  }
  if (kind == "matrix") {
    if (matrix_train.empty()) matrix_train = {9, 30};
    if (matrix_val.empty()) matrix_val = {9, 30, 90};
    const auto csv = (dir / "matrix.csv").string();
    auto cells = generalization_matrix(cfg, matrix_train, matrix_val, runs, csv, log);
    for (const auto& m : cells)
      std::cout << "train " << m.train_length << " val " << m.val_length << ' ' << m.stats.mean << '\n';
    write_run_summary((dir / "summary.json").string(), "sweep matrix", cfg, {csv}, seconds_since(t0),
                      nlohmann::json{{"train", matrix_train}, {"val", matrix_val}, {"runs", runs}}.dump());
    return 0;
  }
  throw std::runtime_error("unknown sweep kind '" + kind + "' (extrapolation, ablation or matrix)");
}

int report(const std::vector<theory::Check>& checks) {
  std::string failed;
  for (const auto& ch : checks) {
    std::cout << (ch.passed ? "PASS " : "FAIL ") << ch.name << ": " << ch.detail << '\n';
    if (!ch.passed && failed.empty()) failed = ch.name;
  }
  std::cout.flush();
  if (!failed.empty()) throw AssertionFailed(failed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ELMUR memory transformer: data, training, evaluation and checks"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "write an oracle dataset for the configured task");
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "train with behavior cloning, write checkpoint and log");
  add_common(train, common);
  std::string data_path, resume;
  std::int64_t max_steps = -1;
  train->add_option("--data", data_path, "dataset file (default: generate from the task section)")
      ->check(CLI::ExistingFile);
  train->add_option("--max-steps", max_steps, "stop after this many more steps");
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over corridor / sequence lengths");
  add_common(eval, common);
  std::string checkpoint;
  std::vector<int> lengths;
  int episodes = 0;
  double min_success = 0.0;
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--lengths", lengths, "default eval.lengths")->delimiter(',');
  eval->add_option("--episodes", episodes, "default eval.episodes");
  eval->add_option("--min-success", min_success, "fail unless every length reaches this");

  auto* sweep = app.add_subcommand("sweep", "extrapolation, ablation or generalization-matrix sweeps");
  add_common(sweep, common);
  std::string kind = "extrapolation";
  std::vector<std::string> checkpoints, variants;
  std::vector<int> grid, mtrain, mval;
  int runs = 0;
  sweep->add_option("--kind", kind)->check(CLI::IsMember({"extrapolation", "ablation", "matrix"}))->capture_default_str();
  sweep->add_option("--checkpoint", checkpoints, "one per run (extrapolation)")->check(CLI::ExistingFile);
  sweep->add_option("--grid", grid, "lengths (extrapolation)")->delimiter(',');
  sweep->add_option("--variants", variants, "ablation variants")->delimiter(',');
  sweep->add_option("--train-lengths", mtrain, "matrix rows")->delimiter(',');
  sweep->add_option("--val-lengths", mval, "matrix columns")->delimiter(',');
  sweep->add_option("--runs", runs, "runs per cell (default eval.runs)");

  auto* theory_cmd = app.add_subcommand("verify-theory", "forgetting, half-life, horizon and boundedness checks");
  std::vector<double> lambdas{0.05, 0.2, 0.5, 0.8, 1.0};
  int k = 50, slots = 2, seg = 10, steps = 10000;
  double eps = 0.5, expected = -1, tolerance = 0.01;
  std::uint64_t theory_seed = 0;
  theory_cmd->add_option("--lambda", lambdas, "blend factors")->delimiter(',')->capture_default_str();
  theory_cmd->add_option("--k", k, "overwrites simulated per lambda")->capture_default_str();
  theory_cmd->add_option("--M", slots, "slots for the horizon check")->capture_default_str();
  theory_cmd->add_option("--L", seg, "segment length for the horizon check")->capture_default_str();
  theory_cmd->add_option("--eps", eps, "horizon threshold")->capture_default_str();
  theory_cmd->add_option("--expected", expected, "expected horizon (default: closed form)");
  theory_cmd->add_option("--tolerance", tolerance)->capture_default_str();
  theory_cmd->add_option("--steps", steps, "random writes for the boundedness check")->capture_default_str();
  theory_cmd->add_option("--seed", theory_seed)->capture_default_str();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full model on the tiny config");
  add_common(grad, common);
  int grad_length = 8;
  double grad_tol = 1e-4;
  grad->add_option("--length", grad_length, "episode length (tokens)")->capture_default_str();
  grad->add_option("--tolerance", grad_tol)->capture_default_str();

  auto* cfg_cmd = app.add_subcommand("config", "print the resolved configuration");
  add_common(cfg_cmd, common);
  bool dump = false, with_help = false;
  cfg_cmd->add_flag("--dump", dump, "print every key with its value");
  cfg_cmd->add_flag("--help-text", with_help, "annotate keys with help and provenance");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(common);
    if (*train) {
      RunConfig cfg = common.resolve();
      return cfg.precision == 64 ? run_train<double>(common, cfg, data_path, max_steps, resume)
                                 : run_train<float>(common, cfg, data_path, max_steps, resume);
    }
    if (*eval) return cmd_eval(common, checkpoint, lengths, episodes, min_success);
    if (*sweep) return cmd_sweep(common, kind, checkpoints, grid, variants, mtrain, mval, runs);
    if (*theory_cmd) {
      std::vector<theory::Check> all;
      auto add = [&](std::vector<theory::Check> v) { all.insert(all.end(), v.begin(), v.end()); };
      add(theory::check_forgetting(lambdas, k, theory_seed));
      std::vector<double> open;
      for (double l : lambdas)
        if (l > 0 && l < 1) open.push_back(l);
      std::vector<double> positive;
      for (double l : lambdas)
        if (l > 0) positive.push_back(l);
      add(theory::check_half_life(positive));
      for (double l : open) {
        const double want = expected >= 0 ? expected : theory::effective_horizon(slots, seg, l, eps);
        auto h = theory::check_horizon(slots, seg, l, eps, want, tolerance);
        for (auto& ch : h) ch.name += " (lambda " + std::to_string(l) + ")";
        add(h);
        if (expected >= 0) break;  // an explicit expectation refers to the first lambda
      }
      add(theory::check_boundedness(open, steps, theory_seed));
      return report(all);
    }
    if (*grad) {
      RunConfig base;
      base.model = gradcheck_config();
      RunConfig cfg = common.resolve(base);
      auto r = model_gradcheck(cfg.model, grad_length, cfg.train.seed);
      std::ostringstream d;
      d << "max rel error " << r.max_rel_error << " at " << r.worst_param << " over " << r.checked << " parameters";
      return report({{"gradient check", r.max_rel_error < grad_tol, d.str()}});
    }
    if (*cfg_cmd) {
      RunConfig cfg = common.resolve();
      if (dump || with_help) std::cout << config_dump(cfg, with_help);
      else std::cout << "fingerprint " << config_fingerprint(cfg) << '\n';
      return 0;
    }
  } catch (const AssertionFailed& e) {
    std::cerr << "FAILED: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
