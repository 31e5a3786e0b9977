#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace elmur {

// One recorded episode. Times are implicit: step t has time t.
struct Trajectory {
  std::string task;
  std::uint64_t seed = 0;
  int obs_dim = 0;
  std::vector<double> obs;   // [length, obs_dim]
  std::vector<int> actions;  // [length], discrete targets
  std::vector<double> action_values;  // [length, action_dim], continuous targets (empty for discrete tasks)

  int length() const { return obs_dim > 0 ? static_cast<int>(obs.size() / obs_dim) : 0; }
};

}  // namespace elmur
