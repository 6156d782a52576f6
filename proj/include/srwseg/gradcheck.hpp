#pragma once

// Central finite differences against the tape's analytic gradients, in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "srwseg/core/autograd.hpp"
#include "srwseg/core/rng.hpp"

namespace srwseg::gradcheck {

inline constexpr double kStep = 1e-6;
/// Gradients smaller than this are compared on an absolute scale; below it the
/// difference quotient is dominated by cancellation noise (about eps_machine / h).
inline constexpr double kAbsFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kAbsFloor});
  return std::abs(analytic - numeric) / scale;
}

/// Scalar objective of the current tensor values. Must not record a graph or mutate state.
using Objective = std::function<double()>;

inline double central_difference(Tensor<double>& values, std::size_t index, const Objective& f, double h = kStep) {
  const double saved = values[index];
  values[index] = saved + h;
  const double up = f();
  values[index] = saved - h;
  const double down = f();
  values[index] = saved;
  return (up - down) / (2.0 * h);
}

/// Compares `analytic` (gradient of f with respect to `values`) with central differences at
/// the given indices (every index when empty). Returns the maximum relative error.
inline double max_relative_error(Tensor<double>& values, const Tensor<double>& analytic, const Objective& f,
                                 std::vector<std::size_t> indices = {}, double h = kStep) {
  if (indices.empty()) {
    indices.resize(values.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }
  double worst = 0.0;
  for (std::size_t i : indices) {
    const double a = analytic.empty() ? 0.0 : analytic[i];
    worst = std::max(worst, relative_error(a, central_difference(values, i, f, h)));
  }
  return worst;
}

/// Random (reproducible) subset of k indices out of n.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  rng.shuffle(all.begin(), all.end());
  all.resize(std::min(n, k));
  return all;
}

/// Weighted sum <w, t>; turns a tensor-valued op into a scalar objective.
inline double project(const Tensor<double>& t, const Tensor<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

template <class T>
Var<T> project(const Var<T>& t, const Tensor<T>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.value().size(); ++i) s += static_cast<double>(t.value()[i]) * w[i];
  return make_op<T>(Tensor<T>({1}, static_cast<T>(s)), {t}, [w](Node<T>& self) {
    self.parents[0]->accumulate(w * self.grad[0]);
  });
}

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace srwseg::gradcheck
