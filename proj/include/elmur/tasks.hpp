#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "elmur/trajectory.hpp"

namespace elmur {

enum TMazeAction : int { kLeft = 0, kRight = 1, kForward = 2 };
inline constexpr int kTMazeObsDim = 3;  // cue, corridor flag, junction flag
inline constexpr int kTMazeActions = 3;

struct TMazeConfig {
  int corridor = 9;  // junction is reached at step `corridor`
  int cue = 0;       // +1 / -1, or 0 to draw it from the seed
};

// Episode of length corridor + 1. The cue shows only at t = 0.
Trajectory tmaze_generate(const TMazeConfig& cfg, std::uint64_t seed);
int tmaze_cue(const Trajectory& t);
// Only the junction decision counts.
bool tmaze_success(const Trajectory& t, std::span<const int> predicted);

struct RepeatFirstConfig {
  int alphabet = 4;
  int length = 30;
};

// Observation: one-hot of the current symbol. Target: the first symbol.
Trajectory repeat_first_generate(const RepeatFirstConfig& cfg, std::uint64_t seed);
// Success is the prediction at the final step.
bool repeat_first_success(const Trajectory& t, std::span<const int> predicted);

// Delayed recall over `segments` segments of `segment` steps. A symbol is shown
// at the first step of a segment drawn from 0..segments-2 (never the last, so
// it is out of context at the end); all other observations are zero. Targets
// are a blank class (`alphabet`) until the symbol appears and the symbol from
// then on. Success is the final prediction.
struct RecallConfig {
  int alphabet = 8;
  int segment = 5;
  int segments = 3;
  int length() const { return segments * segment; }
};

Trajectory recall_generate(const RecallConfig& cfg, std::uint64_t seed);
bool recall_success(const Trajectory& t, std::span<const int> predicted);

// Episode i gets seed derive_seed(base_seed, task, i); corridor lengths are
// drawn uniformly from `lengths`.
std::vector<Trajectory> tmaze_dataset(std::span<const int> lengths, int episodes, std::uint64_t base_seed);
std::vector<Trajectory> repeat_first_dataset(const RepeatFirstConfig& cfg, int episodes, std::uint64_t base_seed);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDatasetFormatVersion = 1;

// JSON lines: a header {format_version, obs_dim, n_actions}, then one record
// {task, seed, length, obs, actions} per episode.
void dataset_write(const std::string& path, std::span<const Trajectory> episodes, int obs_dim, int n_actions);

struct Dataset {
  int obs_dim = 0;
  int n_actions = 0;
  std::vector<Trajectory> episodes;
};

Dataset dataset_read(const std::string& path);

}  // namespace elmur
