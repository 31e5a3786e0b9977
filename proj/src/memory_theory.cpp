#include "elmur/memory_theory.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "elmur/memory.hpp"

namespace elmur::theory {

ForgettingWeights forgetting_coefficients(double lambda, int k) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::domain_error("forgetting_coefficients: lambda must be in [0, 1]");
  if (k < 0) throw std::domain_error("forgetting_coefficients: k must be >= 0");
  ForgettingWeights w;
  w.initial = std::pow(1.0 - lambda, k);
  w.writes.resize(static_cast<std::size_t>(k));
  for (int u = 1; u <= k; ++u) w.writes[u - 1] = lambda * std::pow(1.0 - lambda, k - u);
  return w;
}

double half_life(double lambda) {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw std::domain_error("half_life: lambda must be in (0, 1]");
  if (lambda == 1.0) return 0.0;
  return std::log(2.0) / -std::log1p(-lambda);
}

double effective_horizon(int slots, int segment_length, double lambda, double eps) {
  if (slots < 1 || segment_length < 1) throw std::domain_error("effective_horizon: M and L must be >= 1");
  if (!(lambda > 0.0 && lambda < 1.0)) throw std::domain_error("effective_horizon: lambda must be in (0, 1)");
  if (!(eps > 0.0 && eps <= 1.0)) throw std::domain_error("effective_horizon: eps must be in (0, 1]");
  if (eps == 1.0) return 0.0;
  return static_cast<double>(slots) * segment_length * std::log(eps) / std::log1p(-lambda);
}

namespace {

std::vector<double> sample_in_ball(Rng& rng, int dim, double radius) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double n2 = 0.0;
  for (double& x : v) {
    x = rng.normal(0.0, 1.0);
    n2 += x * x;
  }
  const double r = radius * std::pow(rng.uniform(), 1.0 / dim) / std::sqrt(n2);
  for (double& x : v) x *= r;
  return v;
}

double max_slot_norm(const MemoryState<double>& s) {
  const int slots = s.slots(), d = s.dim();
  auto v = s.m.values();
  double best = 0.0;
  for (int j = 0; j < slots; ++j) {
    double n2 = 0.0;
    for (int i = 0; i < d; ++i) n2 += v[static_cast<std::size_t>(j) * d + i] * v[static_cast<std::size_t>(j) * d + i];
    best = std::max(best, std::sqrt(n2));
  }
  return best;
}

}  // namespace

double verify_boundedness(double bound, double lambda, int steps, std::uint64_t seed, int slots, int dim) {
  LruConfig cfg{slots, lambda, 0.0};
  cfg.validate();
  Rng rng(seed);
  MemoryState<double> state = lru_init<double>(cfg, 1, dim, seed);
  {
    std::vector<double> init;
    for (int j = 0; j < slots; ++j) {
      auto v = sample_in_ball(rng, dim, bound);
      init.insert(init.end(), v.begin(), v.end());
    }
    state.m = Tensor<double>({1, slots, dim}, std::move(init));
  }
  double worst = max_slot_norm(state);
  for (int step = 0; step < steps; ++step) {
    std::vector<double> cand;
    for (int j = 0; j < slots; ++j) {
      auto v = sample_in_ball(rng, dim, bound);
      cand.insert(cand.end(), v.begin(), v.end());
    }
    state = lru_update(state, Tensor<double>({1, slots, dim}, std::move(cand)), static_cast<std::int64_t>(step), cfg);
    worst = std::max(worst, max_slot_norm(state));
  }
  return worst;
}

}  // namespace elmur::theory

namespace elmur::theory {

namespace {

std::string num(double v) {
  std::ostringstream o;
  o << std::setprecision(10) << v;
  return o.str();
}

}  // namespace

std::vector<Check> check_forgetting(const std::vector<double>& lambdas, int max_k, std::uint64_t seed) {
  constexpr int d = 4;
  double worst = 0, worst_sum = 0;
  Rng rng(derive_seed(seed, "theory-forgetting"));
  for (double lambda : lambdas) {
    LruConfig cfg{1, lambda, 0.0};
    std::vector<std::vector<double>> history;
    auto draw = [&] {
      std::vector<double> v(d);
      for (double& x : v) x = rng.normal(0.0, 1.0);
      history.push_back(v);
      return Tensor<double>({1, 1, d}, v);
    };
    auto state = lru_update(lru_init<double>(cfg, 1, d, 0), draw(), 0, cfg);
    for (int k = 0; k <= max_k; ++k) {
      if (k > 0) state = lru_update(state, draw(), k, cfg);
      auto w = forgetting_coefficients(lambda, k);
      double total = w.initial;
      for (double x : w.writes) total += x;
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
      for (int c = 0; c < d; ++c) {
        double expect = w.initial * history[0][c];
        for (int u = 1; u <= k; ++u) expect += w.writes[u - 1] * history[u][c];
        worst = std::max(worst, std::abs(expect - state.m.values()[c]));
      }
    }
  }
  return {{"forgetting closed form matches simulation", worst <= 1e-12, "max coefficient error " + num(worst)},
          {"forgetting coefficients sum to one", worst_sum <= 1e-12, "max deviation " + num(worst_sum)}};
}

std::vector<Check> check_half_life(const std::vector<double>& lambdas) {
  bool ok = true;
  std::ostringstream detail;
  for (double lambda : lambdas) {
    LruConfig cfg{1, lambda, 0.0};
    auto state = lru_update(lru_init<double>(cfg, 1, 1, 0), Tensor<double>({1, 1, 1}, {1.0}), 0, cfg);
    int k = 0;
    while (state.m.values()[0] > 0.5) state = lru_update(state, Tensor<double>({1, 1, 1}, {0.0}), ++k, cfg);
    // At lambda = 1 the closed form is 0; its limit from below is 1 overwrite.
    const int predicted = std::max(1, static_cast<int>(std::ceil(half_life(lambda) - 1e-12)));
    ok &= predicted == k;
    detail << (detail.tellp() > 0 ? "; " : "") << "lambda " << lambda << ": simulated " << k << ", closed form " << predicted;
  }
  const double h = half_life(1e-3), asym = std::log(2.0) / 1e-3;
  const double rel = std::abs(h - asym) / asym;
  return {{"half-life matches first simulated crossing", ok, detail.str()},
          {"half-life approaches ln2/lambda", rel < 1e-3, "lambda 1e-3: " + num(h) + " vs " + num(asym)}};
}

std::vector<Check> check_horizon(int slots, int segment_length, double lambda, double eps, double expected,
                                 double tolerance) {
  const double h = effective_horizon(slots, segment_length, lambda, eps);
  LruConfig cfg{slots, lambda, 0.0};
  auto state = lru_init<double>(cfg, 1, 1, 0);
  std::int64_t crossed = -1;
  for (int seg = 0; crossed < 0 && seg < 1000000; ++seg) {
    const std::int64_t end = static_cast<std::int64_t>(seg + 1) * segment_length - 1;
    state = lru_update(state, Tensor<double>({1, slots, 1}, std::vector<double>(slots, seg == 0 ? 1.0 : 0.0)), end, cfg);
    if (seg > 0 && state.m.values()[0] <= eps) crossed = static_cast<std::int64_t>(seg) * segment_length;
  }
  const double interval = static_cast<double>(slots) * segment_length;
  return {{"horizon closed form", std::abs(h - expected) <= tolerance,
           "H = " + num(h) + ", expected " + num(expected) + " +- " + num(tolerance)},
          {"horizon simulation crossing", crossed >= 0 && std::abs(static_cast<double>(crossed) - h) <= interval,
           "crossed at step " + std::to_string(crossed) + ", closed form " + num(h) + ", interval " + num(interval)}};
}

std::vector<Check> check_boundedness(const std::vector<double>& lambdas, int steps, std::uint64_t seed) {
  double worst = 0;
  for (std::size_t i = 0; i < lambdas.size(); ++i)
    worst = std::max(worst, verify_boundedness(1.0, lambdas[i], steps, derive_seed(seed, "theory-bound", i)));
  return {{"slot norms stay within the write bound", worst <= 1.0 + 1e-9, "max norm " + num(worst)}};
}

}  // namespace elmur::theory
