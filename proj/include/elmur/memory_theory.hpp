#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Closed forms for how long content survives repeated convex LRU writes, and
// a Monte-Carlo probe of the norm bound.
namespace elmur::theory {

struct ForgettingWeights {
  double initial = 1.0;         // (1 - lambda)^k
  std::vector<double> writes;   // entry u-1 is lambda * (1 - lambda)^(k - u), u = 1..k
};

ForgettingWeights forgetting_coefficients(double lambda, int k);

// Overwrites until the initial content weight halves: ln 2 / -ln(1 - lambda).
// lambda = 1 gives 0. Throws std::domain_error for lambda outside (0, 1].
double half_life(double lambda);

// Environment steps until a stored contribution falls below eps when each slot
// is rewritten once per `slots` segments of `segment_length` steps:
// slots * segment_length * ln(eps) / ln(1 - lambda).
double effective_horizon(int slots, int segment_length, double lambda, double eps);

// Runs `steps` LRU writes whose candidates are drawn uniformly from the ball of
// radius `bound`, starting from slots inside the same ball, and returns the
// largest slot norm seen.
double verify_boundedness(double bound, double lambda, int steps, std::uint64_t seed, int slots = 4, int dim = 8);

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Single-slot LRU runs with random d-dim writes against the closed-form
// expansion, for every lambda and k = 0..max_k. Also checks that the
// coefficients sum to one.
std::vector<Check> check_forgetting(const std::vector<double>& lambdas, int max_k, std::uint64_t seed);

// First simulated overwrite count with initial weight <= 1/2 against
// ceil(half_life), plus the small-lambda asymptote ln 2 / lambda at 1e-3.
std::vector<Check> check_half_life(const std::vector<double>& lambdas);

// Closed-form horizon against `expected` +- `tolerance`, and a simulation of
// M slots written once per segment, in which the first slot's content must
// cross weight eps within one write interval (M * L steps) of the closed form.
std::vector<Check> check_horizon(int slots, int segment_length, double lambda, double eps, double expected,
                                 double tolerance);

// `steps` random writes of norm <= 1 per lambda; no slot norm may exceed 1 + 1e-9.
std::vector<Check> check_boundedness(const std::vector<double>& lambdas, int steps, std::uint64_t seed);

}  // namespace elmur::theory
