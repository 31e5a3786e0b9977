#include "elmur/config.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace elmur {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0)) fail("lr must be > 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(lr_end_factor >= 0)) fail("lr_end_factor must be >= 0");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (epochs < 1) fail("epochs must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (!(grad_clip > 0)) fail("grad_clip must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must lie in [0, 1)");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (task.name != "tmaze" && task.name != "repeat_first" && task.name != "recall")
    throw ConfigError("task.name must be tmaze, repeat_first or recall");
  if (task.train_lengths.empty()) throw ConfigError("task.train_lengths must not be empty");
  for (int l : task.train_lengths)
    if (l < 1) throw ConfigError("task.train_lengths entries must be >= 1");
  if (task.episodes < 1) throw ConfigError("task.episodes must be >= 1");
  if (task.alphabet < 2) throw ConfigError("task.alphabet must be >= 2");
  if (task.segments < 2) throw ConfigError("task.segments must be >= 2");
  if (eval.episodes < 1 || eval.runs < 1 || eval.batch < 1) throw ConfigError("eval counts must be >= 1");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename V>
V parse_number(const std::string& s) {
  std::istringstream in(s);
  V v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  std::string s = o.str();
  // shortest form that reads back exactly
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream q;
    q << std::setprecision(p) << v;
    if (std::stod(q.str()) == v) return q.str();
  }
  return s;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');) {
    part = trim(part);
    if (!part.empty()) out.push_back(parse_number<int>(part));
  }
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

#define FIELD_NUM(sec, key, expr, type, help, source)                                               \
  ConfigField {                                                                                     \
    sec, key, help, source, [](const RunConfig& c) { return fmt(static_cast<double>(c.expr)); },    \
        [](RunConfig& c, const std::string& v) { c.expr = parse_number<type>(v); }                  \
  }
#define FIELD_INT(sec, key, expr, help, source)                                                           \
  ConfigField {                                                                                           \
    sec, key, help, source, [](const RunConfig& c) { return std::to_string(c.expr); },                    \
        [](RunConfig& c, const std::string& v) { c.expr = parse_number<decltype(c.expr)>(v); }            \
  }
#define FIELD_BOOL(sec, key, expr, help, source)                                                  \
  ConfigField {                                                                                   \
    sec, key, help, source, [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.expr = parse_bool(v); }                        \
  }
#define FIELD_INTS(sec, key, expr, help, source)                                                   \
  ConfigField {                                                                                    \
    sec, key, help, source, [](const RunConfig& c) { return join(c.expr); },                       \
        [](RunConfig& c, const std::string& v) {                                                   \
          c.expr = parse_ints(v);                                                                  \
        }                                                                                          \
  }

std::vector<ConfigField> build_fields() {
  const std::string table = "hyperparameter table, T-Maze column: ";
  std::vector<ConfigField> f{
      FIELD_INT("model", "obs_dim", model.obs_dim, "observation width", ""),
      ConfigField{"model", "action_space", "discrete or continuous", "",
                  [](const RunConfig& c) {
                    return std::string(c.model.action_space == ActionSpace::Discrete ? "discrete" : "continuous");
                  },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "discrete") c.model.action_space = ActionSpace::Discrete;
                    else if (v == "continuous") c.model.action_space = ActionSpace::Continuous;
                    else throw ConfigError("action_space must be discrete or continuous");
                  }},
      FIELD_INT("model", "action_dim", model.action_dim, "number of actions (discrete) or action width", ""),
      FIELD_INT("model", "d_model", model.d_model, "token and memory width", table + "d_model"),
      FIELD_INT("model", "n_layers", model.n_layers, "ELMUR layers", table + "Layers"),
      FIELD_INT("model", "heads", model.heads, "attention heads", table + "Heads"),
      FIELD_INT("model", "context_length", model.context_length, "segment length L", table + "Context length"),
      FIELD_INT("model", "max_distance", model.max_distance, "D_max of the token/memory bias table", ""),
      FIELD_INT("model", "memory_slots", model.memory_slots, "memory slots M per layer", table + "Memory size"),
      FIELD_NUM("model", "lru_blend", model.lru_blend, double, "LRU blend lambda", table + "LRU blend"),
      FIELD_NUM("model", "memory_init_std", model.memory_init_std, double, "memory init std sigma",
                table + "Memory init std"),
      ConfigField{"model", "ffn", "mlp or moe", "",
                  [](const RunConfig& c) { return std::string(c.model.ffn_kind == FfnKind::Mlp ? "mlp" : "moe"); },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "mlp") c.model.ffn_kind = FfnKind::Mlp;
                    else if (v == "moe") c.model.ffn_kind = FfnKind::Moe;
                    else throw ConfigError("ffn must be mlp or moe");
                  }},
      FIELD_INT("model", "mlp_hidden", model.mlp_hidden, "hidden width of the plain MLP feed-forward", ""),
      FIELD_INT("model", "moe_routed", model.moe.routed, "routed experts", table + "Experts (MoE)"),
      FIELD_INT("model", "moe_shared", model.moe.shared, "shared experts", table + "Shared Experts"),
      FIELD_INT("model", "moe_top_k", model.moe.top_k, "experts per token (table lists 3 > 2 experts)",
                table + "Top-k routing"),
      FIELD_INT("model", "moe_routed_hidden", model.moe.routed_hidden, "routed expert hidden width",
                table + "Routed d_ff"),
      FIELD_INT("model", "moe_shared_hidden", model.moe.shared_hidden, "shared expert hidden width",
                table + "Shared d_ff"),
      FIELD_NUM("model", "dropout", model.dropout, double, "token dropout", table + "Dropout"),
      FIELD_NUM("model", "attn_dropout", model.attn_dropout, double, "attention dropout", table + "Dropatt"),
      FIELD_NUM("model", "memory_dropout", model.memory_dropout, double, "dropout on memory candidates",
                table + "Memory dropout"),
      FIELD_BOOL("model", "shared_memory", model.shared_memory, "one memory shared by all layers (ablation)", ""),
      FIELD_BOOL("model", "rel_bias", model.rel_bias, "token/memory relative bias (ablation switch)", ""),
      FIELD_BOOL("model", "lru", model.lru, "LRU slot choice; false always blends slot 0 (ablation)", ""),
      ConfigField{"model", "memory_gradient", "detach (cut at segment boundaries) or bptt", "",
                  [](const RunConfig& c) {
                    return std::string(c.model.memory_gradient == MemoryGradient::Detach ? "detach" : "bptt");
                  },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "detach") c.model.memory_gradient = MemoryGradient::Detach;
                    else if (v == "bptt") c.model.memory_gradient = MemoryGradient::Bptt;
                    else throw ConfigError("memory_gradient must be detach or bptt");
                  }},
      FIELD_INT("train", "batch_size", train.batch_size, "episodes per batch", table + "Batch size"),
      FIELD_NUM("train", "lr", train.lr, double, "peak learning rate", table + "Learning rate"),
      FIELD_INT("train", "warmup_steps", train.warmup_steps, "linear warmup steps", table + "Warmup steps"),
      FIELD_BOOL("train", "cosine_decay", train.cosine_decay, "cosine decay after warmup", table + "Cosine decay"),
      FIELD_NUM("train", "lr_end_factor", train.lr_end_factor, double, "final lr as a fraction of lr",
                table + "LR end factor"),
      FIELD_NUM("train", "weight_decay", train.weight_decay, double, "decoupled weight decay", table + "Weight decay"),
      FIELD_INT("train", "epochs", train.epochs, "passes over the dataset", table + "Epochs"),
      FIELD_INT("train", "max_steps", train.max_steps, "stop after this many steps (0: all epochs)", ""),
      FIELD_NUM("train", "grad_clip", train.grad_clip, double, "global gradient norm clip", table + "Grad clip"),
      FIELD_NUM("train", "beta1", train.beta1, double, "Adam beta1", table + "Beta1"),
      FIELD_NUM("train", "beta2", train.beta2, double, "Adam beta2", table + "Beta2"),
      FIELD_NUM("train", "adam_eps", train.adam_eps, double, "Adam epsilon", ""),
      FIELD_NUM("train", "label_smoothing", train.label_smoothing, double, "cross-entropy label smoothing",
                table + "Label smoothing"),
      FIELD_INT("train", "seed", train.seed, "root seed; every sub-seed derives from it", ""),
      ConfigField{"task", "name", "tmaze, repeat_first or recall", "", [](const RunConfig& c) { return c.task.name; },
                  [](RunConfig& c, const std::string& v) { c.task.name = v; }},
      FIELD_INTS("task", "train_lengths", task.train_lengths,
                 "comma list: corridor lengths (tmaze) or sequence lengths (repeat_first)", ""),
      FIELD_INT("task", "episodes", task.episodes, "training episodes", ""),
      FIELD_INT("task", "alphabet", task.alphabet, "repeat_first / recall alphabet size", ""),
      FIELD_INT("task", "segments", task.segments, "recall: segments per episode", ""),
      FIELD_INTS("eval", "lengths", eval.lengths, "comma list of evaluation lengths", ""),
      FIELD_INT("eval", "episodes", eval.episodes, "episodes per length and run", ""),
      FIELD_INT("eval", "runs", eval.runs, "independent runs for mean and SEM", ""),
      FIELD_INT("eval", "batch", eval.batch, "episodes evaluated together", ""),
      FIELD_INT("run", "precision", precision, "32 or 64 bit floats", ""),
      FIELD_INT("run", "workers", workers, "worker thread cap", ""),
  };
  return f;
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = build_fields();
  return fields;
}

namespace {

const ConfigField& find_field(const std::string& name) {
  for (const auto& f : config_fields())
    if (f.name() == name) return f;
  throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace

void config_set(RunConfig& cfg, const std::string& name, const std::string& value) {
  try {
    find_field(name).set(cfg, trim(value));
  } catch (const ConfigError& e) {
    if (std::string(e.what()).rfind("unknown", 0) == 0) throw;
    throw ConfigError(name + ": " + e.what());
  }
}

std::string config_get(const RunConfig& cfg, const std::string& name) { return find_field(name).get(cfg); }

RunConfig config_parse(const std::string& text, RunConfig cfg) {
  std::istringstream in(text);
  std::string section, line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string full = key.find('.') != std::string::npos || section.empty() ? key : section + "." + key;
    try {
      config_set(cfg, full, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig config_load(const std::string& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_parse(ss.str(), std::move(base));
}

std::string config_dump(const RunConfig& cfg, bool with_help) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get(cfg);
    if (with_help) {
      out << "  # " << f.help;
      if (!f.source.empty()) out << " (" << f.source << ")";
    }
    out << '\n';
  }
  return out.str();
}

std::string config_fingerprint(const RunConfig& cfg) {
  const std::string s = config_dump(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

}  // namespace elmur
