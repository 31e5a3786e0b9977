#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "elmur/numcore.hpp"

namespace testutil {

using elmur::Tensor;

inline Tensor<double> random_tensor(elmur::Shape shape, elmur::Rng& rng, bool grad = true, double scale = 1.0) {
  std::vector<double> v(elmur::shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, scale);
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

// Largest relative error between the taped gradient of f and central
// differences, over every entry of every input.
inline double gradcheck(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                        double step = 1e-5) {
  for (auto& x : inputs) x.zero_grad();
  {
    elmur::Tape<double> tape;
    elmur::TapeScope<double> scope(tape);
    Tensor<double> loss = f();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto data = x.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = f().item();
      data[i] = saved - step;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double err = std::abs(numeric - analytic[i]) / std::max(1e-6, std::abs(numeric) + std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace testutil
