#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "srwseg/gradcheck.hpp"
#include "srwseg/isw.hpp"

using namespace srwseg;
using gradcheck::random_tensor;

namespace {

// Exhaustive search over all 2-partitions of a small set.
double brute_force_two_cluster_sse(const std::vector<double>& v) {
  const int n = static_cast<int>(v.size());
  double best = std::numeric_limits<double>::infinity();
  for (unsigned m = 1; m + 1 < (1u << n); ++m) {
    double s[2] = {0, 0}, q[2] = {0, 0};
    int c[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      const int k = (m >> i) & 1;
      s[k] += v[i];
      q[k] += v[i] * v[i];
      ++c[k];
    }
    best = std::min(best, (q[0] - s[0] * s[0] / c[0]) + (q[1] - s[1] * s[1] / c[1]));
  }
  return best;
}

Tensor<double> theta_from(std::vector<double> values, int c) {
  return Tensor<double>({1, c, c}, std::move(values));
}

}  // namespace

TEST(CenterFeatures, Examples) {
  auto c = isw::center_features(Tensor<double>({1, 1, 1, 2}, std::vector<double>{1, 3}));
  EXPECT_DOUBLE_EQ(c[0], -1.0);
  EXPECT_DOUBLE_EQ(c[1], 1.0);
  const auto flat = isw::center_features(Tensor<double>({1, 2, 2, 2}, 4.0));
  for (double v : flat.values()) EXPECT_EQ(v, 0.0);
  Rng rng(1);
  auto r = isw::center_features(random_tensor({2, 3, 4, 4}, rng, 5.0));
  for (int n = 0; n < 2; ++n) {
    for (int ch = 0; ch < 3; ++ch) {
      double m = 0;
      for (int k = 0; k < 16; ++k) m += r.plane(n, ch)[k];
      EXPECT_LT(std::abs(m / 16), 1e-6);
    }
  }
}

TEST(Covariance, OrthogonalRowsGiveIdentity) {
  const double s = std::sqrt(2.0);
  auto a = isw::covariance(Tensor<double>({1, 2, 1, 2}, std::vector<double>{s, 0, 0, s}), false);
  auto b = isw::covariance(Tensor<double>({1, 2, 1, 2}, std::vector<double>{1, 1, 1, -1}), false);
  for (const auto* t : {&a, &b}) {
    EXPECT_NEAR(t->at(0, 0, 0), 1.0, 1e-12);
    EXPECT_NEAR(t->at(0, 1, 1), 1.0, 1e-12);
    EXPECT_NEAR(t->at(0, 0, 1), 0.0, 1e-12);
    EXPECT_NEAR(t->at(0, 1, 0), 0.0, 1e-12);
  }
}

TEST(Covariance, SymmetricPsdOverRandomTensors) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    auto theta = isw::covariance(random_tensor({2, 5, 3, 4}, rng, 1.0 + t % 4));
    for (int n = 0; n < 2; ++n) {
      for (int i = 0; i < 5; ++i) {
        EXPECT_GE(theta.at(n, i, i), 0.0);
        for (int j = 0; j < 5; ++j) EXPECT_NEAR(theta.at(n, i, j), theta.at(n, j, i), 1e-12);
      }
      for (int k = 0; k < 5; ++k) {
        std::vector<double> z(5);
        for (auto& v : z) v = rng.normal();
        double q = 0;
        for (int i = 0; i < 5; ++i)
          for (int j = 0; j < 5; ++j) q += z[i] * theta.at(n, i, j) * z[j];
        EXPECT_GE(q, -1e-10);
      }
    }
  }
}

TEST(DeepWhiteningLoss, Examples) {
  EXPECT_DOUBLE_EQ(isw::deep_whitening_loss(theta_from({1, 0, 0, 1}, 2)), 0.0);
  EXPECT_DOUBLE_EQ(isw::deep_whitening_loss(theta_from({1, 0.5, 0.5, 1}, 2)), 0.25);
  EXPECT_DOUBLE_EQ(isw::deep_whitening_loss(theta_from({2, 0, 0, 2}, 2)), 0.5);
  EXPECT_THROW(isw::deep_whitening_loss(Tensor<double>({1, 2, 3})), ValidationError);
}

TEST(PairVariance, Examples) {
  Rng rng(3);
  auto th = isw::covariance(random_tensor({3, 4, 2, 2}, rng));
  const auto same = isw::pair_variance(th, th);
  for (double v : same.values()) EXPECT_EQ(v, 0.0);
  auto v = isw::pair_variance(Tensor<double>({1, 1, 1}, 2.0), Tensor<double>({1, 1, 1}, 0.0));
  EXPECT_DOUBLE_EQ(v[0], 1.0);
  EXPECT_THROW(isw::pair_variance(Tensor<double>({2, 2, 2}), Tensor<double>({1, 2, 2})), ValidationError);
}

TEST(PairVariance, ClosedFormAndHomogeneity) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    auto a = isw::covariance(random_tensor({3, 4, 3, 3}, rng));
    auto b = isw::covariance(random_tensor({3, 4, 3, 3}, rng));
    auto v = isw::pair_variance(a, b);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        double closed = 0;
        for (int n = 0; n < 3; ++n) closed += std::pow(a.at(n, i, j) - b.at(n, i, j), 2) / 4;
        EXPECT_NEAR(v.at(i, j), closed / 3, 1e-10);
      }
    }
    const double c = 1.0 + t % 3;
    auto vs = isw::pair_variance(a * c, b * c);
    for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(vs[k], c * c * v[k], 1e-10);
  }
}

TEST(VarianceEma, UpdateRule) {
  isw::VarianceState s;
  s.momentum = 0.0;
  isw::update_variance_ema(s, Tensor<double>({2, 2}, 3.0));
  isw::update_variance_ema(s, Tensor<double>({2, 2}, 5.0));
  EXPECT_EQ(s.ema[0], 5.0);
  EXPECT_EQ(s.warm_samples, 2);

  isw::VarianceState half;
  half.momentum = 0.5;
  half.ema = Tensor<double>({1, 1}, 0.0);
  half.warm_samples = 1;
  isw::update_variance_ema(half, Tensor<double>({1, 1}, 4.0));
  EXPECT_DOUBLE_EQ(half.ema[0], 2.0);

  isw::VarianceState stream;
  isw::update_variance_ema(stream, Tensor<double>({1, 1}, 0.0));
  for (int i = 0; i < 5000; ++i) isw::update_variance_ema(stream, Tensor<double>({1, 1}, 7.0));
  EXPECT_NEAR(stream.ema[0], 7.0, 1e-9);

  isw::VarianceState first;
  isw::update_variance_ema(first, Tensor<double>({1, 1}, 9.0));
  EXPECT_EQ(first.ema[0], 9.0);
}

TEST(KMeans1d, SeparatesTwoGroups) {
  std::vector<double> v{0.0, 5.0, 0.1, 5.1};
  auto r = isw::kmeans_1d(v, 2);
  EXPECT_EQ(r.assignments[0], r.assignments[2]);
  EXPECT_EQ(r.assignments[1], r.assignments[3]);
  EXPECT_NE(r.assignments[0], r.assignments[1]);
  EXPECT_NEAR(r.centroids[0], 0.05, 1e-12);
  EXPECT_NEAR(r.centroids[1], 5.05, 1e-12);
  EXPECT_TRUE(r.converged);
}

TEST(KMeans1d, DegenerateAndSingleCluster) {
  std::vector<double> same(6, 0.3);
  auto r = isw::kmeans_1d(same, 2);
  for (int a : r.assignments) EXPECT_EQ(a, 0);
  EXPECT_EQ(r.sizes[1], 0);

  std::vector<double> v{1, 2, 3, 10};
  auto one = isw::kmeans_1d(v, 1);
  EXPECT_DOUBLE_EQ(one.centroids[0], 4.0);
  for (int a : one.assignments) EXPECT_EQ(a, 0);

  EXPECT_THROW(isw::kmeans_1d(std::vector<double>{}, 2), ValidationError);
}

TEST(KMeans1d, MatchesBruteForceOptimum) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    for (int n = 2; n <= 10; ++n) {
      std::vector<double> v(n);
      for (auto& x : v) x = seed % 2 ? rng.uniform() : std::exp(rng.normal());
      auto r = isw::kmeans_1d(v, 2, isw::kDefaultKMeansIters, seed);
      EXPECT_NEAR(isw::within_cluster_sse(v, r.assignments, 2), brute_force_two_cluster_sse(v), 1e-12)
          << "seed " << seed << " n " << n;
    }
  }
}

TEST(KMeans1d, ThreeClustersDeterministicGivenSeed) {
  std::vector<double> v{0, 0.1, 0.2, 5, 5.1, 9.9, 10};
  auto a = isw::kmeans_1d(v, 3, 50, 42);
  auto b = isw::kmeans_1d(v, 3, 50, 42);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.assignments[0], a.assignments[2]);
  EXPECT_EQ(a.assignments[3], a.assignments[4]);
  EXPECT_EQ(a.assignments[5], a.assignments[6]);
}

TEST(ClusterVariance, SelectsOnlyTheHighEntry) {
  isw::VarianceState s;
  s.ema = Tensor<double>({3, 3}, std::vector<double>{0, 0.01, 0.02, 0.01, 0, 3.0, 0.02, 3.0, 0});
  s.warm_samples = 1;
  auto m = isw::cluster_variance(s);
  EXPECT_EQ(m.selected_count, 2);
  EXPECT_TRUE(m.at(1, 2));
  EXPECT_TRUE(m.at(2, 1));
  EXPECT_FALSE(m.at(0, 1));
  EXPECT_FALSE(m.at(0, 2));
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(m.at(i, i));
}

TEST(ClusterVariance, EqualEntriesGiveEmptyMask) {
  isw::VarianceState s;
  s.ema = Tensor<double>({4, 4}, 0.5);
  s.warm_samples = 1;
  EXPECT_EQ(isw::cluster_variance(s).selected_count, 0);
  isw::VarianceState tiny;
  tiny.ema = Tensor<double>({2, 2}, std::vector<double>{0, 1, 1, 0});
  tiny.warm_samples = 1;
  EXPECT_EQ(isw::cluster_variance(tiny).selected_count, 0);
}

TEST(ClusterVariance, MaskInvariantsOnRandomStatistics) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const int c = 2 + t % 9;
    isw::VarianceState s;
    s.ema = Tensor<double>({c, c});
    for (int i = 0; i < c; ++i)
      for (int j = i; j < c; ++j) s.ema.at(i, j) = s.ema.at(j, i) = std::exp(rng.normal());
    s.warm_samples = 1;
    auto m = isw::cluster_variance(s);
    int ones_upper = 0;
    for (int i = 0; i < c; ++i) {
      EXPECT_FALSE(m.at(i, i));
      for (int j = 0; j < c; ++j) {
        EXPECT_EQ(m.at(i, j), m.at(j, i));
        if (j > i && m.at(i, j)) ++ones_upper;
      }
    }
    EXPECT_EQ(m.selected_count, 2 * ones_upper);
  }
}

TEST(ClusterVariance, RefusesDuringWarmup) {
  isw::VarianceState s;
  EXPECT_THROW(isw::cluster_variance(s), StateError);
  s.required_warm = 10;
  isw::update_variance_ema(s, Tensor<double>({3, 3}, 1.0));
  EXPECT_THROW(isw::cluster_variance(s), StateError);
}

TEST(IswLoss, Examples) {
  auto theta = theta_from({1, 0.5, 0.5, 1}, 2);
  auto mask = isw::WhiteningMask::empty(2);
  EXPECT_EQ(isw::isw_loss(theta, mask), 0.0);
  mask.select(0, 1);
  EXPECT_EQ(mask.selected_count, 2);
  EXPECT_DOUBLE_EQ(isw::isw_loss(theta, mask), 0.5);
  EXPECT_EQ(isw::isw_loss(theta_from({3, 0, 0, 2}, 2), mask), 0.0);
  EXPECT_THROW(isw::isw_loss(theta, isw::WhiteningMask::empty(3)), ValidationError);
}

TEST(IswLoss, AbsoluteHomogeneity) {
  Rng rng(6);
  auto theta = isw::covariance(random_tensor({2, 4, 3, 3}, rng));
  auto mask = isw::WhiteningMask::empty(4);
  mask.select(0, 2);
  mask.select(1, 3);
  const double base = isw::isw_loss(theta, mask);
  for (double c : {-3.0, -0.5, 0.0, 2.0}) EXPECT_NEAR(isw::isw_loss(theta * c, mask), std::abs(c) * base, 1e-12);
}

TEST(IswGradients, ThroughCovarianceToFeatures) {
  Rng rng(7);
  Var<double> f(random_tensor({2, 4, 3, 3}, rng), true);
  auto mask = isw::WhiteningMask::empty(4);
  mask.select(0, 1);
  mask.select(2, 3);
  mask.select(1, 3);
  backward(isw::isw_loss(isw::covariance(f), mask));
  auto objective = [&] { return isw::isw_loss(isw::covariance(f.value()), mask); };
  EXPECT_LT(gradcheck::max_relative_error(f.mutable_value(), f.grad(), objective), 1e-4);
}

TEST(IswGradients, DeepWhiteningThroughCovariance) {
  Rng rng(8);
  Var<double> f(random_tensor({2, 3, 4, 4}, rng), true);
  backward(isw::deep_whitening_loss(isw::covariance(f)));
  auto objective = [&] { return isw::deep_whitening_loss(isw::covariance(f.value())); };
  EXPECT_LT(gradcheck::max_relative_error(f.mutable_value(), f.grad(), objective), 1e-4);
}

TEST(IswGradients, UncenteredCovariance) {
  Rng rng(9);
  Var<double> f(random_tensor({1, 3, 2, 3}, rng), true);
  auto w = random_tensor({1, 3, 3}, rng);
  backward(gradcheck::project(isw::covariance(f, false), w));
  auto objective = [&] { return gradcheck::project(isw::covariance(f.value(), false), w); };
  EXPECT_LT(gradcheck::max_relative_error(f.mutable_value(), f.grad(), objective), 1e-4);
}
