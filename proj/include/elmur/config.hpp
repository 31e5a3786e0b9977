#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "elmur/model.hpp"

namespace elmur {

struct TrainConfig {
  int batch_size = 128;
  double lr = 2.06e-4;
  int warmup_steps = 10000;
  bool cosine_decay = true;
  double lr_end_factor = 1.0;
  double weight_decay = 1e-4;
  int epochs = 1000;
  int max_steps = 0;  // 0: run all epochs
  double grad_clip = 5.0;
  double beta1 = 0.95;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double label_smoothing = 0.16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TaskConfig {
  std::string name = "tmaze";  // tmaze | repeat_first | recall
  // t-maze corridor lengths, repeat_first sequence lengths, or recall segment lengths
  std::vector<int> train_lengths{9, 30};
  int episodes = 6000;
  int alphabet = 8;  // repeat_first, recall
  int segments = 3;  // recall
};

struct EvalConfig {
  std::vector<int> lengths{9, 30, 90, 300, 1000};
  int episodes = 100;
  int runs = 3;
  int batch = 50;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
  EvalConfig eval;
  int precision = 32;
  int workers = 1;

  void validate() const;
};

// One settable key. `section.key` is its full name.
struct ConfigField {
  std::string section;
  std::string key;
  std::string help;
  std::string source;  // provenance note, e.g. the hyperparameter table row it mirrors
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string name() const { return section + "." + key; }
};

const std::vector<ConfigField>& config_fields();

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// `name` is section.key; throws ConfigError for unknown keys or bad values.
void config_set(RunConfig& cfg, const std::string& name, const std::string& value);
std::string config_get(const RunConfig& cfg, const std::string& name);

// `key = value` lines under `[section]` headers; `#` starts a comment.
RunConfig config_parse(const std::string& text, RunConfig base = {});
RunConfig config_load(const std::string& path, RunConfig base = {});
std::string config_dump(const RunConfig& cfg, bool with_help = false);

// Stable hash of the dumped configuration.
std::string config_fingerprint(const RunConfig& cfg);

}  // namespace elmur
