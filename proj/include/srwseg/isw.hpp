#pragma once

// Instance selective whitening.
//
// Channel covariances of the enhanced features are taken for an image and for its
// photometrically transformed twin. Entries whose value moves a lot between the two
// (high paired variance) are treated as style; a 1-D two-cluster k-means on the smoothed
// variances picks them out, and the loss pushes only those covariance entries to zero.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "srwseg/core/ops.hpp"
#include "srwseg/core/rng.hpp"

namespace srwseg::isw {

inline constexpr double kDefaultEmaMomentum = 0.99;
inline constexpr int kDefaultKMeansIters = 50;

// ---------------------------------------------------------------------------------------
// Covariance

/// Subtracts the spatial mean of every (sample, channel) plane.
template <class T>
Tensor<T> center_features(const Tensor<T>& f) {
  require_feature_map(f, "center_features");
  Tensor<T> out = f;
  const std::size_t hw = f.plane_size();
  for (int i = 0; i < f.dim(0); ++i) {
    for (int c = 0; c < f.dim(1); ++c) {
      T* p = out.plane(i, c);
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      const T mean = static_cast<T>(s / hw);
      for (std::size_t k = 0; k < hw; ++k) p[k] -= mean;
    }
  }
  return out;
}

/// theta_n = (1 / HW) X_n X_n^T with X_n the (C, HW) flattening of sample n, centered per
/// channel first when `center` is set. Output shape (N, C, C).
template <class T>
Var<T> covariance(const Var<T>& f, bool center = true) {
  require_rank(f.value(), 4, "covariance");
  using Mat = kernels::RowMatrix<T>;
  const int n = f.dim(0), c = f.dim(1);
  const int hw = static_cast<int>(f.value().plane_size());
  auto x = std::make_shared<Tensor<T>>(center ? center_features(f.value()) : f.value());
  Tensor<T> theta({n, c, c});
  for (int i = 0; i < n; ++i) {
    kernels::ConstMatMap<T> xm(x->plane(i, 0), c, hw);
    kernels::MatMap<T> tm(theta.data() + static_cast<std::size_t>(i) * c * c, c, c);
    tm.noalias() = xm * xm.transpose();
    tm *= static_cast<T>(1.0 / hw);
  }
  return make_op<T>(std::move(theta), {f}, [x, center](Node<T>& self) {
    auto& pf = *self.parents[0];
    const int n = pf.value.dim(0), c = pf.value.dim(1);
    const int hw = static_cast<int>(pf.value.plane_size());
    auto& gx = pf.grad_buffer();
    Mat g(c, c);
    Mat gxc(c, hw);
    for (int i = 0; i < n; ++i) {
      kernels::ConstMatMap<T> gt(self.grad.data() + static_cast<std::size_t>(i) * c * c, c, c);
      g = gt + gt.transpose();
      gxc.noalias() = g * kernels::ConstMatMap<T>(x->plane(i, 0), c, hw);
      gxc *= static_cast<T>(1.0 / hw);
      if (center) {
        for (int ch = 0; ch < c; ++ch) gxc.row(ch).array() -= gxc.row(ch).mean();
      }
      kernels::MatMap<T>(gx.plane(i, 0), c, hw) += gxc;
    }
  });
}

template <class T>
Tensor<T> covariance(const Tensor<T>& f, bool center = true) {
  require_feature_map(f, "covariance");
  NoGradGuard guard;
  return covariance(Var<T>(f), center).value();
}

template <class T>
void require_square_batch(const Tensor<T>& theta, const char* what) {
  if (theta.rank() != 3 || theta.dim(1) != theta.dim(2)) {
    throw ValidationError(std::string(what) + ": expected (N, C, C) covariance, got " + to_string(theta.shape()));
  }
}

// ---------------------------------------------------------------------------------------
// Losses

/// Mean absolute deviation of each covariance from the identity, averaged over the batch.
template <class T>
Var<T> deep_whitening_loss(const Var<T>& theta) {
  require_square_batch(theta.value(), "deep_whitening_loss");
  const int n = theta.dim(0), c = theta.dim(1);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < c; ++a) {
      for (int b = 0; b < c; ++b) s += std::abs(theta.value().at(i, a, b) - (a == b ? 1.0 : 0.0));
    }
  }
  const double denom = static_cast<double>(n) * c * c;
  return make_op<T>(Tensor<T>({1}, static_cast<T>(s / denom)), {theta}, [denom](Node<T>& self) {
    auto& pt = *self.parents[0];
    const int n = pt.value.dim(0), c = pt.value.dim(1);
    Tensor<T> g(pt.value.shape());
    const double scale = self.grad[0] / denom;
    for (int i = 0; i < n; ++i) {
      for (int a = 0; a < c; ++a) {
        for (int b = 0; b < c; ++b) {
          const double d = pt.value.at(i, a, b) - (a == b ? 1.0 : 0.0);
          g.at(i, a, b) = static_cast<T>(d > 0 ? scale : (d < 0 ? -scale : 0.0));
        }
      }
    }
    pt.accumulate(g);
  });
}

template <class T>
double deep_whitening_loss(const Tensor<T>& theta) {
  NoGradGuard guard;
  return deep_whitening_loss(Var<T>(theta)).item();
}

/// Symmetric binary selection of style-bearing covariance entries. Diagonal is never selected.
struct WhiteningMask {
  int channels = 0;
  std::vector<std::uint8_t> m;  // row-major (C, C)
  int selected_count = 0;

  static WhiteningMask empty(int channels) {
    WhiteningMask mask;
    mask.channels = channels;
    mask.m.assign(static_cast<std::size_t>(channels) * channels, 0);
    return mask;
  }

  bool at(int i, int j) const { return m[static_cast<std::size_t>(i) * channels + j] != 0; }

  /// Selects (i, j) and its mirror.
  void select(int i, int j) {
    if (i == j) return;
    auto& a = m[static_cast<std::size_t>(i) * channels + j];
    auto& b = m[static_cast<std::size_t>(j) * channels + i];
    if (!a) selected_count += 2;
    a = b = 1;
  }
};

/// Sum of |theta * mask| over the selected entries divided by their count, per sample, then
/// averaged over the batch. Zero for an empty mask.
template <class T>
Var<T> isw_loss(const Var<T>& theta, const WhiteningMask& mask) {
  require_square_batch(theta.value(), "isw_loss");
  const int n = theta.dim(0), c = theta.dim(1);
  if (mask.channels != c) {
    throw ValidationError("isw_loss: mask is " + std::to_string(mask.channels) + "x" +
                          std::to_string(mask.channels) + ", covariance is " + to_string(theta.shape()));
  }
  if (mask.selected_count == 0) {
    return make_op<T>(Tensor<T>({1}), {theta}, [](Node<T>&) {});
  }
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < c; ++a) {
      for (int b = 0; b < c; ++b) {
        if (mask.at(a, b)) s += std::abs(theta.value().at(i, a, b));
      }
    }
  }
  const double denom = static_cast<double>(n) * mask.selected_count;
  return make_op<T>(Tensor<T>({1}, static_cast<T>(s / denom)), {theta}, [mask, denom](Node<T>& self) {
    auto& pt = *self.parents[0];
    const int n = pt.value.dim(0), c = pt.value.dim(1);
    Tensor<T> g(pt.value.shape());
    const double scale = self.grad[0] / denom;
    for (int i = 0; i < n; ++i) {
      for (int a = 0; a < c; ++a) {
        for (int b = 0; b < c; ++b) {
          if (!mask.at(a, b)) continue;
          const double v = pt.value.at(i, a, b);
          g.at(i, a, b) = static_cast<T>(v > 0 ? scale : (v < 0 ? -scale : 0.0));
        }
      }
    }
    pt.accumulate(g);
  });
}

template <class T>
double isw_loss(const Tensor<T>& theta, const WhiteningMask& mask) {
  NoGradGuard guard;
  return isw_loss(Var<T>(theta), mask).item();
}

// ---------------------------------------------------------------------------------------
// Paired variance and its running estimate

/// V = (1/N) sum_i 1/2 [(theta(x_i) - mu_i)^2 + (theta(Tx_i) - mu_i)^2], mu_i the elementwise
/// mean of the pair. Returned as a (C, C) double matrix.
template <class T>
Tensor<double> pair_variance(const Tensor<T>& theta_orig, const Tensor<T>& theta_aug) {
  require_square_batch(theta_orig, "pair_variance");
  if (theta_orig.shape() != theta_aug.shape()) {
    throw ValidationError("pair_variance: covariance batches differ, " + to_string(theta_orig.shape()) + " vs " +
                          to_string(theta_aug.shape()));
  }
  const int n = theta_orig.dim(0), c = theta_orig.dim(1);
  Tensor<double> v({c, c});
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < c; ++a) {
      for (int b = 0; b < c; ++b) {
        const double x = theta_orig.at(i, a, b), y = theta_aug.at(i, a, b);
        const double mu = 0.5 * (x + y);
        v.at(a, b) += 0.5 * ((x - mu) * (x - mu) + (y - mu) * (y - mu));
      }
    }
  }
  v *= 1.0 / n;
  return v;
}

/// Exponential moving average of the paired variance for one SRW layer.
struct VarianceState {
  Tensor<double> ema;  // (C, C); empty until the first update
  double momentum = kDefaultEmaMomentum;
  long warm_samples = 0;
  long required_warm = 1;

  bool initialized() const { return warm_samples > 0 && !ema.empty(); }
  bool warm() const { return initialized() && warm_samples >= required_warm; }
};

inline void update_variance_ema(VarianceState& state, const Tensor<double>& v_batch) {
  if (v_batch.rank() != 2 || v_batch.dim(0) != v_batch.dim(1)) {
    throw ValidationError("update_variance_ema: expected a square matrix, got " + to_string(v_batch.shape()));
  }
  if (!state.initialized()) {
    state.ema = v_batch;
  } else {
    state.ema.check_same(v_batch, "update_variance_ema");
    const double m = state.momentum;
    for (std::size_t i = 0; i < v_batch.size(); ++i) state.ema[i] = m * state.ema[i] + (1.0 - m) * v_batch[i];
  }
  ++state.warm_samples;
}

// ---------------------------------------------------------------------------------------
// 1-D k-means

struct KMeansResult {
  std::vector<int> assignments;
  std::vector<double> centroids;
  std::vector<int> sizes;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Best split of sorted values into a prefix and a suffix under within-cluster SSE.
/// Returns the prefix length (1..n-1).
inline std::size_t best_two_split(const std::vector<double>& sorted) {
  const std::size_t n = sorted.size();
  std::vector<double> s(n + 1, 0.0), q(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    s[i + 1] = s[i] + sorted[i];
    q[i + 1] = q[i] + sorted[i] * sorted[i];
  }
  auto sse = [&](std::size_t lo, std::size_t hi) {
    const double cnt = static_cast<double>(hi - lo);
    const double sum = s[hi] - s[lo];
    return (q[hi] - q[lo]) - sum * sum / cnt;
  };
  std::size_t best = 1;
  double best_cost = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < n; ++k) {
    if (sorted[k] == sorted[k - 1]) continue;  // never split equal values
    const double cost = sse(0, k) + sse(k, n);
    if (cost < best_cost) {
      best_cost = cost;
      best = k;
    }
  }
  return best;
}

inline std::vector<double> plus_plus_init(const std::vector<double>& distinct, int k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> centers{distinct[rng.below(distinct.size())]};
  std::vector<double> d2(distinct.size());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < distinct.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : centers) best = std::min(best, (distinct[i] - c) * (distinct[i] - c));
      d2[i] = best;
      total += best;
    }
    double r = rng.uniform() * total;
    std::size_t pick = 0;
    for (; pick + 1 < distinct.size(); ++pick) {
      r -= d2[pick];
      if (r < 0 && d2[pick] > 0) break;
    }
    centers.push_back(distinct[pick]);
  }
  std::sort(centers.begin(), centers.end());
  return centers;
}

}  // namespace detail

/// Lloyd iterations on scalars. For k = 2 the iteration starts from the optimal contiguous
/// split of the sorted values, so the result is the exact two-cluster optimum; larger k starts
/// from a seeded k-means++ draw. Centroids come out in ascending order. When there are fewer
/// distinct values than k, the surplus clusters stay empty (size 0) and repeat the last centroid.
inline KMeansResult kmeans_1d(std::span<const double> values, int k, int max_iters = kDefaultKMeansIters,
                              std::uint64_t seed = 0) {
  if (values.empty()) throw ValidationError("kmeans_1d: empty input");
  if (k < 1) throw ValidationError("kmeans_1d: k must be >= 1");
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError("kmeans_1d: non-finite value");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> distinct = sorted;
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  const int effective = std::min<int>(k, static_cast<int>(distinct.size()));
  std::vector<double> centers;
  if (effective == 1) {
    centers = {std::accumulate(sorted.begin(), sorted.end(), 0.0) / sorted.size()};
  } else if (effective == 2) {
    const std::size_t cut = detail::best_two_split(sorted);
    centers = {std::accumulate(sorted.begin(), sorted.begin() + cut, 0.0) / cut,
               std::accumulate(sorted.begin() + cut, sorted.end(), 0.0) / (sorted.size() - cut)};
  } else {
    centers = detail::plus_plus_init(distinct, effective, seed);
  }

  KMeansResult result;
  result.assignments.assign(values.size(), -1);
  auto nearest = [&](double v) {
    int best = 0;
    for (int c = 1; c < effective; ++c) {
      if (std::abs(v - centers[c]) < std::abs(v - centers[best])) best = c;
    }
    return best;
  };
  for (int it = 0; it < std::max(1, max_iters); ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const int a = nearest(values[i]);
      changed = changed || a != result.assignments[i];
      result.assignments[i] = a;
    }
    result.iterations = it + 1;
    std::vector<double> sum(static_cast<std::size_t>(effective), 0.0);
    std::vector<int> cnt(static_cast<std::size_t>(effective), 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      sum[result.assignments[i]] += values[i];
      ++cnt[result.assignments[i]];
    }
    for (int c = 0; c < effective; ++c) {
      if (cnt[c] > 0) centers[c] = sum[c] / cnt[c];
    }
    if (!changed && it > 0) {
      result.converged = true;
      break;
    }
  }

  result.centroids = centers;
  result.sizes.assign(static_cast<std::size_t>(k), 0);
  for (int a : result.assignments) ++result.sizes[a];
  while (static_cast<int>(result.centroids.size()) < k) result.centroids.push_back(result.centroids.back());
  return result;
}

/// Within-cluster sum of squared distances of an assignment.
inline double within_cluster_sse(std::span<const double> values, const std::vector<int>& assignments, int k) {
  std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
  std::vector<int> cnt(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum[assignments[i]] += values[i];
    ++cnt[assignments[i]];
  }
  double sse = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int a = assignments[i];
    const double d = values[i] - sum[a] / cnt[a];
    sse += d * d;
  }
  return sse;
}

/// Builds the whitening mask from the smoothed paired variance: the upper-triangle entries
/// falling in the higher of two k-means clusters are selected (and mirrored).
inline WhiteningMask cluster_variance(const VarianceState& state) {
  if (!state.warm()) {
    throw StateError("cluster_variance: variance statistics are still warming up (" +
                     std::to_string(state.warm_samples) + " of " + std::to_string(state.required_warm) +
                     " updates); keep accumulating before building the mask");
  }
  const int c = state.ema.dim(0);
  WhiteningMask mask = WhiteningMask::empty(c);
  std::vector<double> values;
  std::vector<std::pair<int, int>> where;
  for (int a = 0; a < c; ++a) {
    for (int b = a + 1; b < c; ++b) {
      values.push_back(state.ema.at(a, b));
      where.emplace_back(a, b);
    }
  }
  if (values.size() < 2) return mask;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) return mask;
  const KMeansResult km = kmeans_1d(values, 2);
  const int high = km.centroids[1] > km.centroids[0] ? 1 : 0;
  if (km.sizes[high] == 0) return mask;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (km.assignments[i] == high) mask.select(where[i].first, where[i].second);
  }
  return mask;
}

}  // namespace srwseg::isw
