#pragma once

// Central finite-difference oracle for reverse-mode gradients. Lives in test
// code only; it never calls backward() on the perturbed evaluations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nextscale/autograd.hpp"

namespace nextscale::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator so that near-zero gradients
// are judged on absolute error (floor * tolerance) instead of round-off noise.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares backward() against central differences for every element of
/// `leaves` (or a random subset of `max_per_leaf` elements each when > 0).
inline GradCheckResult gradcheck(const std::function<Var<double>()>& loss_fn,
                                 std::vector<Var<double>> leaves, double eps = 1e-5,
                                 std::size_t max_per_leaf = 0, unsigned seed = 7) {
  for (auto& leaf : leaves) {
    leaf.zero_grad();
  }
  backward(loss_fn());
  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic = leaf.grad();
    std::vector<std::size_t> idx(leaf.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_leaf > 0 && idx.size() > max_per_leaf) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_leaf);
    }
    auto& values = leaf.mutable_value().data;
    for (std::size_t i : idx) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss_fn().value()[0];
      values[i] = saved - eps;
      const double down = loss_fn().value()[0];
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = dist(rng);
  return t;
}

}  // namespace nextscale::testing
