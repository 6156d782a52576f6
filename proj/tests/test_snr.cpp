#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "srwseg/gradcheck.hpp"
#include "srwseg/snr.hpp"

using namespace srwseg;
using gradcheck::random_tensor;

namespace {

// Straight-line oracle for IN, independent of the tape kernel.
Tensor<double> naive_instance_norm(const Tensor<double>& f, double eps) {
  Tensor<double> out(f.shape());
  for (int n = 0; n < f.dim(0); ++n) {
    for (int c = 0; c < f.dim(1); ++c) {
      double mean = 0, var = 0;
      const int hw = f.dim(2) * f.dim(3);
      for (int y = 0; y < f.dim(2); ++y)
        for (int x = 0; x < f.dim(3); ++x) mean += f.at(n, c, y, x);
      mean /= hw;
      for (int y = 0; y < f.dim(2); ++y)
        for (int x = 0; x < f.dim(3); ++x) var += std::pow(f.at(n, c, y, x) - mean, 2);
      var /= hw;
      for (int y = 0; y < f.dim(2); ++y)
        for (int x = 0; x < f.dim(3); ++x) out.at(n, c, y, x) = (f.at(n, c, y, x) - mean) / std::sqrt(var + eps);
    }
  }
  return out;
}

snr::SnrParams<double> random_params(int channels, int hidden, Rng& rng, bool trainable) {
  snr::SnrParams<double> p;
  p.fc1_w = Var<double>(random_tensor({channels, hidden}, rng, 0.7), trainable);
  p.fc1_b = Var<double>(random_tensor({hidden}, rng, 0.3), trainable);
  p.fc2_w = Var<double>(random_tensor({hidden, channels}, rng, 0.7), trainable);
  p.fc2_b = Var<double>(random_tensor({channels}, rng, 0.3), trainable);
  return p;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(InstanceNormalize, ConstantChannelBecomesZero) {
  Tensor<double> f({1, 1, 3, 3}, 7.0);
  auto y = snr::instance_normalize(f);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNormalize, TwoPixelHandComputation) {
  Tensor<double> f({1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
  auto y = snr::instance_normalize(f, 1e-12);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
}

TEST(InstanceNormalize, SinglePixelIsZero) {
  Tensor<double> f({2, 3, 1, 1}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto y = snr::instance_normalize(f);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNormalize, RejectsNonFinite) {
  Tensor<double> f({1, 1, 2, 2}, 1.0);
  f[2] = std::nan("");
  EXPECT_THROW(snr::instance_normalize(f), ValidationError);
}

TEST(InstanceNormalize, MatchesNaiveOracleAndPostConditions) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_tensor({2, 3, 4, 5}, rng, 3.0);
    auto y = snr::instance_normalize(f);
    EXPECT_LT(max_abs_diff(y, naive_instance_norm(f, snr::kDefaultEps)), 1e-12);
    for (int n = 0; n < 2; ++n) {
      for (int c = 0; c < 3; ++c) {
        const double* p = y.plane(n, c);
        double m = 0, v = 0;
        for (int k = 0; k < 20; ++k) m += p[k];
        m /= 20;
        for (int k = 0; k < 20; ++k) v += (p[k] - m) * (p[k] - m);
        EXPECT_LT(std::abs(m), 1e-6);
        EXPECT_LT(std::abs(std::sqrt(v / 20) - 1.0), 1e-3);
      }
    }
  }
}

TEST(ChannelAttention, ZeroWeightsGiveOneHalf) {
  auto p = snr::zero_params<double>(4, 2);
  Rng rng(3);
  auto alpha = snr::channel_attention(random_tensor({2, 4, 3, 3}, rng), p);
  ASSERT_EQ(alpha.shape(), (Shape{2, 4}));
  for (double a : alpha.values()) EXPECT_DOUBLE_EQ(a, 0.5);
}

TEST(ChannelAttention, TinyHandComputedHead) {
  // GAP(R) = [1, 0]; hidden = relu(1) = 1; logits = [2, 0]
  auto p = snr::zero_params<double>(2, 1);
  p.fc1_w.mutable_value() = Tensor<double>({2, 1}, std::vector<double>{1.0, 0.0});
  p.fc2_w.mutable_value() = Tensor<double>({1, 2}, std::vector<double>{2.0, 0.0});
  Tensor<double> r({1, 2, 1, 2}, std::vector<double>{0.5, 1.5, -1.0, 1.0});
  auto alpha = snr::channel_attention(r, p);
  EXPECT_NEAR(alpha[0], 0.8807970779778823, 1e-12);
  EXPECT_NEAR(alpha[1], 0.5, 1e-12);
}

TEST(ChannelAttention, RangeAndShapeErrors) {
  Rng rng(5);
  auto p = random_params(6, 3, rng, false);
  for (int t = 0; t < 10; ++t) {
    auto alpha = snr::channel_attention(random_tensor({3, 6, 2, 2}, rng, 4.0), p);
    for (double a : alpha.values()) {
      EXPECT_GT(a, 0.0);
      EXPECT_LT(a, 1.0);
    }
  }
  EXPECT_THROW(snr::channel_attention(random_tensor({1, 5, 2, 2}, rng), p), ValidationError);
}

TEST(ChannelAttention, BatchSharedAveragesPooledFeatures) {
  Rng rng(9);
  auto p = random_params(4, 2, rng, false);
  p.batch_shared = true;
  auto alpha = snr::channel_attention(random_tensor({3, 4, 2, 2}, rng), p);
  for (int n = 1; n < 3; ++n) {
    for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(alpha.at(n, c), alpha.at(0, c));
  }
}

TEST(ReductionRule, ClampsForToyWidths) {
  EXPECT_EQ(snr::effective_reduction(256, 16), 16);
  EXPECT_EQ(snr::effective_reduction(32, 16), 8);
  EXPECT_EQ(snr::hidden_width(32, 16), 4);
  EXPECT_EQ(snr::effective_reduction(4, 16), 1);
  EXPECT_EQ(snr::effective_reduction(2, 16), 1);
}

TEST(RestitutionSplit, DirectEvaluation) {
  Tensor<double> r({1, 1, 1, 2}, std::vector<double>{2.0, -4.0});
  Tensor<double> a({1, 1}, 0.25);
  auto [plus, minus] = snr::restitution_split(r, a);
  EXPECT_DOUBLE_EQ(plus[0], 0.5);
  EXPECT_DOUBLE_EQ(plus[1], -1.0);
  EXPECT_DOUBLE_EQ(minus[0], 1.5);
  EXPECT_DOUBLE_EQ(minus[1], -3.0);
}

TEST(RestitutionSplit, BoundaryAndSymmetry) {
  Rng rng(1);
  auto r = random_tensor({2, 3, 2, 2}, rng);
  auto [p1, m1] = snr::restitution_split(r, Tensor<double>({2, 3}, 1.0));
  EXPECT_EQ(max_abs_diff(p1, r), 0.0);
  for (double v : m1.values()) EXPECT_EQ(v, 0.0);
  auto [ph, mh] = snr::restitution_split(r, Tensor<double>({2, 3}, 0.5));
  EXPECT_EQ(max_abs_diff(ph, mh), 0.0);
  EXPECT_LT(max_abs_diff(ph, r * 0.5), 1e-15);
}

TEST(RestitutionSplit, RejectsAttentionOutsideUnitInterval) {
  Rng rng(2);
  auto r = random_tensor({1, 2, 2, 2}, rng);
  EXPECT_THROW(snr::restitution_split(r, Tensor<double>({1, 2}, 1.5)), ValidationError);
  EXPECT_THROW(snr::restitution_split(r, Tensor<double>({1, 2}, -0.1)), ValidationError);
  EXPECT_THROW(snr::restitution_split(r, Tensor<double>({1, 3}, 0.5)), ValidationError);
}

TEST(SnrForward, FixedPointOfInstanceNorm) {
  Rng rng(4);
  auto f = snr::instance_normalize(random_tensor({2, 4, 5, 5}, rng), 1e-12);
  auto p = random_params(4, 2, rng, false);
  auto out = snr::snr_forward(f, p);
  EXPECT_LT(max_abs_diff(out.normalized, f), 1e-4);
  EXPECT_LT(max_abs_diff(out.enhanced, f), 1e-4);
  EXPECT_LT(max_abs_diff(out.corrupted, f), 1e-4);
}

TEST(SnrForward, ZeroHeadRestoresHalfTheResidual) {
  Rng rng(6);
  auto f = random_tensor({2, 4, 3, 3}, rng, 2.0);
  auto out = snr::snr_forward(f, snr::zero_params<double>(4, 2));
  auto in = naive_instance_norm(f, snr::kDefaultEps);
  auto expected = in + (f - in) * 0.5;
  EXPECT_LT(max_abs_diff(out.enhanced, expected), 1e-12);
}

TEST(SnrForward, PartitionIdentityOverRandomTensors) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    auto f = random_tensor({2, 4, 3, 3}, rng, 1.0 + t % 5);
    auto p = random_params(4, 2, rng, false);
    auto out = snr::snr_forward(f, p);
    auto residual = f - out.normalized;
    EXPECT_LT(max_abs_diff(out.residual_plus + out.residual_minus, residual), 1e-10);
    EXPECT_LT(max_abs_diff(out.enhanced + out.corrupted - out.normalized, f), 1e-10);
    EXPECT_LT(max_abs_diff(out.enhanced + out.residual_minus, f), 1e-10);
    EXPECT_LT(max_abs_diff(out.enhanced, out.normalized + out.residual_plus), 1e-12);
  }
}

TEST(SnrForward, FloatPartitionIdentity) {
  Rng rng(8);
  auto fd = random_tensor({2, 4, 3, 3}, rng);
  auto p = snr::zero_params<float>(4, 2);
  auto out = snr::snr_forward(fd.cast<float>(), p);
  EXPECT_LT(max_abs_diff(out.enhanced + out.residual_minus, fd.cast<float>()), 1e-5f);
}

TEST(SnrForward, ChannelPermutationEquivariance) {
  Rng rng(10);
  const int c = 4, h = 2;
  const std::vector<int> perm{2, 0, 3, 1};
  auto f = random_tensor({2, c, 3, 3}, rng);
  auto p = random_params(c, h, rng, false);
  // permute channels of F and rows of fc1_w / columns of fc2_w / entries of fc2_b
  Tensor<double> fp(f.shape());
  auto q = snr::zero_params<double>(c, h);
  q.fc1_b.mutable_value() = p.fc1_b.value();
  for (int i = 0; i < c; ++i) {
    for (int n = 0; n < 2; ++n) std::copy_n(f.plane(n, perm[i]), 9, fp.plane(n, i));
    for (int j = 0; j < h; ++j) {
      q.fc1_w.mutable_value().at(i, j) = p.fc1_w.value().at(perm[i], j);
      q.fc2_w.mutable_value().at(j, i) = p.fc2_w.value().at(j, perm[i]);
    }
    q.fc2_b.mutable_value()[i] = p.fc2_b.value()[perm[i]];
  }
  auto a = snr::snr_forward(f, p);
  auto b = snr::snr_forward(fp, q);
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < c; ++i) {
      EXPECT_NEAR(b.alpha.at(n, i), a.alpha.at(n, perm[i]), 1e-12);
      for (int k = 0; k < 9; ++k) {
        EXPECT_NEAR(b.enhanced.plane(n, i)[k], a.enhanced.plane(n, perm[i])[k], 1e-12);
        EXPECT_NEAR(b.corrupted.plane(n, i)[k], a.corrupted.plane(n, perm[i])[k], 1e-12);
      }
    }
  }
}

TEST(PixelEntropy, UniformAndOneHot) {
  EXPECT_NEAR(snr::pixel_entropy(Tensor<double>({1, 2, 1, 1}, 0.0))[0], std::log(2.0), 1e-12);
  EXPECT_NEAR(snr::pixel_entropy(Tensor<double>({1, 3, 1, 1}, 0.0))[0], std::log(3.0), 1e-12);
  EXPECT_NEAR(snr::pixel_entropy(Tensor<double>({1, 2, 1, 1}, std::vector<double>{50, -50}))[0], 0.0, 1e-30);
}

TEST(PixelEntropy, BoundsOverRandomTensors) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const int c = 2 + t % 6;
    auto e = snr::pixel_entropy(random_tensor({2, c, 3, 3}, rng, 1.0 + t % 10));
    ASSERT_EQ(e.shape(), (Shape{2, 3, 3}));
    for (double v : e.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, std::log(c) + 1e-12);
    }
  }
}

TEST(PixelEntropy, SingleChannelRejected) {
  EXPECT_THROW(snr::pixel_entropy(Tensor<double>({1, 1, 2, 2}, 0.0)), ValidationError);
}

TEST(MarginLoss, ClosedFormValues) {
  EXPECT_NEAR(snr::margin_loss(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(snr::margin_loss(1.0), std::log(1.0 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(snr::margin_loss(1.0), 1.3132616875182228, 1e-12);
  const double tiny = snr::margin_loss(-1000.0);
  EXPECT_TRUE(std::isfinite(tiny));
  EXPECT_GE(tiny, 0.0);
  EXPECT_LT(tiny, 1e-300);
  EXPECT_NEAR(snr::margin_loss(1000.0), 1000.0, 1e-9);
  EXPECT_THROW(snr::margin_loss(INFINITY), ValidationError);
}

TEST(MarginLoss, StrictlyAboveReluAndMonotone) {
  Rng rng(13);
  for (int t = 0; t < 1000; ++t) {
    const double x1 = rng.uniform(-30, 30), x2 = x1 + rng.uniform(1e-3, 5);
    EXPECT_GT(snr::margin_loss(x1), std::max(0.0, x1));
    EXPECT_LT(snr::margin_loss(x1), snr::margin_loss(x2));
  }
}

TEST(DualCausalityLoss, ZeroDifference) {
  Rng rng(14);
  auto f = random_tensor({2, 4, 3, 3}, rng);
  EXPECT_NEAR(snr::dual_causality_loss(f, f, f), 2.0 * std::log(2.0), 1e-12);
}

TEST(DualCausalityLoss, OneHotEnhancedUniformRest) {
  Tensor<double> enh({1, 2, 2, 2}, std::vector<double>{60, 60, 60, 60, -60, -60, -60, -60});
  Tensor<double> uni({1, 2, 2, 2}, 0.0);
  // L+ = margin(0 - ln 2) = ln(1.5); L- = margin(0) = ln 2
  const double expected = std::log1p(std::exp(-std::log(2.0))) + std::log(2.0);
  EXPECT_NEAR(expected, 1.0986122886681098, 1e-12);
  EXPECT_NEAR(snr::dual_causality_loss(enh, uni, uni), expected, 1e-12);
}

TEST(DualCausalityLoss, PositiveAndShapeChecked) {
  Rng rng(15);
  for (int t = 0; t < 50; ++t) {
    auto a = random_tensor({2, 3, 2, 2}, rng, 5), b = random_tensor({2, 3, 2, 2}, rng, 5),
         c = random_tensor({2, 3, 2, 2}, rng, 5);
    EXPECT_GT(snr::dual_causality_loss(a, b, c), 0.0);
  }
  EXPECT_THROW(snr::dual_causality_loss(random_tensor({1, 3, 2, 2}, rng), random_tensor({1, 3, 2, 3}, rng),
                                        random_tensor({1, 3, 2, 2}, rng)),
               ValidationError);
}

// ---- gradient checks (float64, central differences) ----

TEST(SnrGradients, InstanceNormalize) {
  Rng rng(20);
  Var<double> f(random_tensor({2, 4, 3, 3}, rng, 2.0), true);
  auto w = random_tensor({2, 4, 3, 3}, rng);
  backward(gradcheck::project(snr::instance_normalize(f, 1e-5), w));
  auto objective = [&] {
    NoGradGuard g;
    return gradcheck::project(snr::instance_normalize(Var<double>(f.value()), 1e-5).value(), w);
  };
  EXPECT_LT(gradcheck::max_relative_error(f.mutable_value(), f.grad(), objective), 1e-4);
}

TEST(SnrGradients, AttentionInputsAndParams) {
  Rng rng(21);
  Var<double> r(random_tensor({2, 4, 3, 3}, rng), true);
  auto p = random_params(4, 2, rng, true);
  auto w = random_tensor({2, 4}, rng);
  backward(gradcheck::project(snr::channel_attention(r, p), w));
  auto objective = [&] {
    NoGradGuard g;
    return gradcheck::project(snr::channel_attention(Var<double>(r.value()), p).value(), w);
  };
  EXPECT_LT(gradcheck::max_relative_error(r.mutable_value(), r.grad(), objective), 1e-4);
  for (auto v : p.parameters()) EXPECT_LT(gradcheck::max_relative_error(v.mutable_value(), v.grad(), objective), 1e-4);
}

TEST(SnrGradients, FullBlockAndDualCausality) {
  Rng rng(22);
  Var<double> f(random_tensor({2, 4, 3, 3}, rng, 1.5), true);
  auto p = random_params(4, 2, rng, true);
  auto run = [&](const Var<double>& in) {
    auto out = snr::snr_forward(in, p);
    return snr::dual_causality_loss(out.enhanced, out.normalized, out.corrupted);
  };
  backward(run(f));
  auto objective = [&] {
    NoGradGuard g;
    return run(Var<double>(f.value())).item();
  };
  EXPECT_LT(gradcheck::max_relative_error(f.mutable_value(), f.grad(), objective), 1e-4);
  for (auto v : p.parameters()) EXPECT_LT(gradcheck::max_relative_error(v.mutable_value(), v.grad(), objective), 1e-4);
}

TEST(SnrGradients, DualCausalityAllThreeInputs) {
  Rng rng(23);
  Var<double> a(random_tensor({1, 4, 3, 3}, rng), true), b(random_tensor({1, 4, 3, 3}, rng), true),
      c(random_tensor({1, 4, 3, 3}, rng), true);
  backward(snr::dual_causality_loss(a, b, c));
  auto objective = [&] { return snr::dual_causality_loss(a.value(), b.value(), c.value()); };
  for (auto* v : {&a, &b, &c}) {
    EXPECT_LT(gradcheck::max_relative_error(v->mutable_value(), v->grad(), objective), 1e-4);
  }
}
