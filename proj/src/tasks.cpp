#include "elmur/tasks.hpp"

#include <fstream>

#include "elmur/random.hpp"
#include "json.hpp"

namespace elmur {

Trajectory tmaze_generate(const TMazeConfig& cfg, std::uint64_t seed) {
  if (cfg.corridor < 1) throw std::invalid_argument("tmaze: corridor length must be >= 1");
  if (cfg.cue != 0 && cfg.cue != 1 && cfg.cue != -1) throw std::invalid_argument("tmaze: cue must be -1, 0 or +1");
  int cue = cfg.cue;
  if (cue == 0) {
    Rng rng(derive_seed(seed, "tmaze-cue"));
    cue = rng.bernoulli(0.5) ? 1 : -1;
  }
  Trajectory t;
  t.task = "tmaze";
  t.seed = seed;
  t.obs_dim = kTMazeObsDim;
  const int n = cfg.corridor;
  t.obs.assign(static_cast<std::size_t>(n + 1) * kTMazeObsDim, 0.0);
  for (int i = 0; i < n; ++i) t.obs[i * kTMazeObsDim + 1] = 1.0;
  t.obs[0] = cue;
  t.obs[n * kTMazeObsDim + 2] = 1.0;
  t.actions.assign(n, kForward);
  t.actions.push_back(cue > 0 ? kRight : kLeft);
  return t;
}

int tmaze_cue(const Trajectory& t) { return t.obs.at(0) > 0 ? 1 : -1; }

bool tmaze_success(const Trajectory& t, std::span<const int> predicted) {
  if (static_cast<int>(predicted.size()) != t.length())
    throw std::invalid_argument("tmaze_success: prediction count differs from episode length");
  return predicted.back() == (tmaze_cue(t) > 0 ? kRight : kLeft);
}

Trajectory repeat_first_generate(const RepeatFirstConfig& cfg, std::uint64_t seed) {
  if (cfg.alphabet < 2) throw std::invalid_argument("repeat_first: alphabet must be >= 2");
  if (cfg.length < 1) throw std::invalid_argument("repeat_first: length must be >= 1");
  Rng rng(derive_seed(seed, "repeat-first"));
  Trajectory t;
  t.task = "repeat_first";
  t.seed = seed;
  t.obs_dim = cfg.alphabet;
  t.obs.assign(static_cast<std::size_t>(cfg.length) * cfg.alphabet, 0.0);
  int first = 0;
  for (int i = 0; i < cfg.length; ++i) {
    const int s = rng.uniform_int(0, cfg.alphabet - 1);
    if (i == 0) first = s;
    t.obs[static_cast<std::size_t>(i) * cfg.alphabet + s] = 1.0;
  }
  t.actions.assign(cfg.length, first);
  return t;
}

bool repeat_first_success(const Trajectory& t, std::span<const int> predicted) {
  if (static_cast<int>(predicted.size()) != t.length())
    throw std::invalid_argument("repeat_first_success: prediction count differs from episode length");
  return predicted.back() == t.actions.back();
}

Trajectory recall_generate(const RecallConfig& cfg, std::uint64_t seed) {
  if (cfg.alphabet < 2) throw std::invalid_argument("recall: alphabet must be >= 2");
  if (cfg.segment < 1) throw std::invalid_argument("recall: segment must be >= 1");
  if (cfg.segments < 2) throw std::invalid_argument("recall: segments must be >= 2");
  Rng rng(derive_seed(seed, "recall"));
  Trajectory t;
  t.task = "recall";
  t.seed = seed;
  t.obs_dim = cfg.alphabet;
  const int len = cfg.length();
  const int key = rng.uniform_int(0, cfg.alphabet - 1);
  const int at = rng.uniform_int(0, cfg.segments - 2) * cfg.segment;
  t.obs.assign(static_cast<std::size_t>(len) * cfg.alphabet, 0.0);
  t.obs[static_cast<std::size_t>(at) * cfg.alphabet + key] = 1.0;
  t.actions.assign(len, cfg.alphabet);
  for (int i = at; i < len; ++i) t.actions[i] = key;
  return t;
}

bool recall_success(const Trajectory& t, std::span<const int> predicted) {
  if (static_cast<int>(predicted.size()) != t.length())
    throw std::invalid_argument("recall_success: prediction count differs from episode length");
  return predicted.back() == t.actions.back();
}

std::vector<Trajectory> tmaze_dataset(std::span<const int> lengths, int episodes, std::uint64_t base_seed) {
  if (lengths.empty()) throw std::invalid_argument("tmaze_dataset: no corridor lengths");
  std::vector<Trajectory> out;
  out.reserve(episodes);
  for (int i = 0; i < episodes; ++i) {
    const std::uint64_t s = derive_seed(base_seed, "tmaze", i);
    Rng pick(derive_seed(s, "tmaze-length"));
    const int n = lengths[pick.uniform_int(0, static_cast<int>(lengths.size()) - 1)];
    out.push_back(tmaze_generate({n, 0}, s));
  }
  return out;
}

std::vector<Trajectory> repeat_first_dataset(const RepeatFirstConfig& cfg, int episodes, std::uint64_t base_seed) {
  std::vector<Trajectory> out;
  out.reserve(episodes);
  for (int i = 0; i < episodes; ++i) out.push_back(repeat_first_generate(cfg, derive_seed(base_seed, "repeat_first", i)));
  return out;
}

void dataset_write(const std::string& path, std::span<const Trajectory> episodes, int obs_dim, int n_actions) {
  std::ofstream f(path);
  if (!f) throw DatasetError("dataset_write: cannot open " + path);
  nlohmann::json header{{"format_version", kDatasetFormatVersion}, {"obs_dim", obs_dim}, {"n_actions", n_actions}};
  f << header.dump() << '\n';
  for (const Trajectory& t : episodes) {
    if (t.obs_dim != obs_dim) throw DatasetError("dataset_write: episode observation width differs from header");
    nlohmann::json obs = nlohmann::json::array();
    for (int i = 0; i < t.length(); ++i)
      obs.push_back(std::vector<double>(t.obs.begin() + static_cast<std::ptrdiff_t>(i) * obs_dim,
                                        t.obs.begin() + static_cast<std::ptrdiff_t>(i + 1) * obs_dim));
    nlohmann::json rec{{"task", t.task}, {"seed", t.seed}, {"length", t.length()}, {"obs", obs}, {"actions", t.actions}};
    f << rec.dump() << '\n';
  }
  if (!f) throw DatasetError("dataset_write: write failed for " + path);
}

Dataset dataset_read(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DatasetError("dataset_read: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DatasetError("dataset_read: missing header in " + path);
  Dataset d;
  try {
    auto h = nlohmann::json::parse(line);
    const int version = h.at("format_version").get<int>();
    if (version != kDatasetFormatVersion)
      throw DatasetError("dataset_read: format version " + std::to_string(version) + ", expected " +
                         std::to_string(kDatasetFormatVersion));
    d.obs_dim = h.at("obs_dim").get<int>();
    d.n_actions = h.at("n_actions").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("dataset_read: bad header: ") + e.what());
  }
  std::size_t index = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      auto r = nlohmann::json::parse(line);
      Trajectory t;
      t.task = r.at("task").get<std::string>();
      t.seed = r.at("seed").get<std::uint64_t>();
      t.obs_dim = d.obs_dim;
      const int length = r.at("length").get<int>();
      const auto& obs = r.at("obs");
      if (!obs.is_array() || static_cast<int>(obs.size()) != length) throw DatasetError("obs row count differs from length");
      for (const auto& row : obs) {
        auto v = row.get<std::vector<double>>();
        if (static_cast<int>(v.size()) != d.obs_dim) throw DatasetError("obs row width differs from header obs_dim");
        t.obs.insert(t.obs.end(), v.begin(), v.end());
      }
      t.actions = r.at("actions").get<std::vector<int>>();
      if (static_cast<int>(t.actions.size()) != length) throw DatasetError("action count differs from length");
      for (int a : t.actions)
        if (a < 0 || a >= d.n_actions) throw DatasetError("action " + std::to_string(a) + " out of range");
      d.episodes.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw DatasetError("dataset_read: record " + std::to_string(index) + ": " + e.what());
    }
    ++index;
  }
  return d;
}

}  // namespace elmur
