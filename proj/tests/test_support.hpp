#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "trajdiv/autodiff.hpp"

namespace trajdiv::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Random symmetric PSD matrix B B^T / n with B n x n.
inline Tensor random_psd(std::size_t n, std::mt19937_64& rng) {
  const Tensor b = random_tensor({n, n}, rng);
  RowMatrix m = b.mat() * b.mat().transpose() / static_cast<double>(n);
  return Tensor::from_matrix(m);
}

/// Largest gradient discrepancy, max_i |analytic_i - numeric_i| divided by
/// max(max_i |numeric_i|, floor), over every input. Central differences.
inline double gradient_error(const std::function<ad::Var(const std::vector<ad::Var>&)>& fn,
                             const std::vector<Tensor>& inputs, double step = 1e-5, double floor = 1e-6) {
  std::vector<ad::Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(ad::parameter(t));
  ad::backward(fn(leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> numeric(inputs[k].size());
    double scale = floor;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<ad::Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.push_back(ad::constant(std::move(t)));
        }
        return fn(probe).item();
      };
      numeric[i] = (eval(step) - eval(-step)) / (2.0 * step);
      scale = std::max(scale, std::abs(numeric[i]));
    }
    const Tensor& g = leaves[k].grad();
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = g.empty() ? 0.0 : g[i];
      worst = std::max(worst, std::abs(a - numeric[i]) / scale);
    }
  }
  return worst;
}

}  // namespace trajdiv::testing
