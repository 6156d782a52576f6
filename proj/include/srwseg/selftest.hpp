#pragma once

// Finite-difference gradient checks and property oracles run by `srwseg selftest`.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "srwseg/gradcheck.hpp"
#include "srwseg/isw.hpp"
#include "srwseg/network.hpp"
#include "srwseg/snr.hpp"

namespace srwseg::selftest {

inline constexpr double kComponentTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;
inline constexpr int kPropertyTrials = 100;
inline constexpr int kKMeansSeeds = 200;
inline constexpr int kWhiteningSteps = 500;
inline constexpr double kWhiteningTarget = 0.9;

struct Check {
  std::string group;  // "gradient" or "property"
  std::string name;
  double value = 0.0;  // worst error, failure count or achieved reduction
  double tolerance = 0.0;
  bool passed = false;
  bool skipped = false;
  std::string detail;
};

enum class Component { In, Attention, Restitution, Snr, DcLoss, DwtLoss, IswLoss, EndToEnd };

inline const std::vector<std::pair<Component, std::string>>& components() {
  static const std::vector<std::pair<Component, std::string>> all{
      {Component::In, "in"},           {Component::Attention, "attention"}, {Component::Restitution, "restitution"},
      {Component::Snr, "snr"},         {Component::DcLoss, "dc_loss"},      {Component::DwtLoss, "dwt_loss"},
      {Component::IswLoss, "isw_loss"}, {Component::EndToEnd, "end_to_end"}};
  return all;
}

inline std::string component_name(Component c) {
  for (const auto& [k, name] : components()) {
    if (k == c) return name;
  }
  return "?";
}

namespace detail {

using gradcheck::random_tensor;

/// Largest relative error over every entry of each variable (or `per_var` sampled entries).
inline double worst_over(std::vector<Var<double>> vars, const gradcheck::Objective& f, Rng& rng,
                         std::size_t per_var = 0) {
  double worst = 0.0;
  for (auto& v : vars) {
    std::vector<std::size_t> idx;
    if (per_var > 0) idx = gradcheck::sample_indices(v.value().size(), per_var, rng);
    worst = std::max(worst, gradcheck::max_relative_error(v.mutable_value(), v.grad(), f, idx));
  }
  return worst;
}

inline Check gradient_check(const std::string& name, double err, double tol) {
  Check c{"gradient", name, err, tol, err < tol, false, ""};
  char buf[64];
  std::snprintf(buf, sizeof buf, "max rel err %.2e", err);
  c.detail = buf;
  return c;
}

inline network::NetworkConfig end_to_end_config() {
  network::NetworkConfig c;
  c.stage_channels = {4, 8, 8, 8};
  c.aspp_channels = 4;
  c.low_level_channels = 4;
  c.decoder_channels = 4;
  c.aspp_dilations = {1, 2};
  c.input_h = c.input_w = 16;
  return c;
}

inline Var<double> end_to_end_objective(network::Model<double>& model, const Tensor<double>& x,
                                        const Tensor<double>& xa, const Tensor<int>& y,
                                        const std::vector<isw::WhiteningMask>& masks) {
  auto art = model.forward(x, &xa, network::Mode::Train);
  std::vector<Var<double>> terms{ops::cross_entropy(art.logits, y)};
  std::vector<double> weights{1.0};
  for (std::size_t s = 0; s < art.stages.size(); ++s) {
    const auto& o = art.per_stage_snr[s];
    terms.push_back(snr::dual_causality_loss(o.enhanced, o.normalized, o.corrupted));
    weights.push_back(1.0);
    terms.push_back(isw::isw_loss(art.per_stage_theta_raw[s], masks[s]));
    terms.push_back(isw::isw_loss(art.per_stage_theta_aug[s], masks[s]));
    weights.push_back(0.3);
    weights.push_back(0.3);
  }
  return ops::weighted_sum(terms, weights);
}

}  // namespace detail

/// L_ISW directly on a covariance batch. A masked entry sitting exactly at 0 is a kink of |.|,
/// so the check is reported as skipped there rather than compared.
inline Check isw_loss_check(const Tensor<double>& theta, const isw::WhiteningMask& mask, double tol = kComponentTolerance) {
  const int c = mask.channels;
  const std::size_t cc = static_cast<std::size_t>(c) * c;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    if (mask.m[k % cc] && theta[k] == 0.0) {
      return {"gradient", "isw_loss", 0.0, tol, true, true, "masked covariance entry is exactly 0 (nondifferentiable)"};
    }
  }
  Var<double> t(theta, true);
  backward(isw::isw_loss(t, mask));
  auto f = [&] { return isw::isw_loss(t.value(), mask); };
  return detail::gradient_check("isw_loss", gradcheck::max_relative_error(t.mutable_value(), t.grad(), f), tol);
}

/// Central differences (float64) against the tape for one component.
inline Check finite_difference_check(Component component, std::uint64_t seed, double tol) {
  using detail::random_tensor;
  Rng rng(seed);
  const std::string name = component_name(component);
  switch (component) {
    case Component::In: {
      Var<double> f(random_tensor({2, 4, 3, 3}, rng, 2.0), true);
      const auto w = random_tensor({2, 4, 3, 3}, rng);
      backward(gradcheck::project(snr::instance_normalize(f, 1e-5), w));
      auto obj = [&] { return gradcheck::project(snr::instance_normalize(f.value(), 1e-5), w); };
      return detail::gradient_check(name, detail::worst_over({f}, obj, rng), tol);
    }
    case Component::Attention: {
      Var<double> r(random_tensor({2, 4, 3, 3}, rng), true);
      const auto p = snr::make_params<double>(4, 2, rng);
      const auto w = random_tensor({2, 4}, rng);
      backward(gradcheck::project(snr::channel_attention(r, p), w));
      auto obj = [&] { return gradcheck::project(snr::channel_attention(r.value(), p), w); };
      std::vector<Var<double>> vars{r};
      for (auto& v : p.parameters()) vars.push_back(v);
      return detail::gradient_check(name, detail::worst_over(vars, obj, rng), tol);
    }
    case Component::Restitution: {
      Var<double> r(random_tensor({2, 4, 3, 3}, rng), true);
      Tensor<double> a({2, 4});
      for (auto& v : a.values()) v = rng.uniform(0.05, 0.95);
      Var<double> alpha(a, true);
      const auto wp = random_tensor({2, 4, 3, 3}, rng), wm = random_tensor({2, 4, 3, 3}, rng);
      auto split = snr::restitution_split(r, alpha);
      backward(ops::add(gradcheck::project(split.plus, wp), gradcheck::project(split.minus, wm)));
      auto obj = [&] {
        const auto [plus, minus] = snr::restitution_split(r.value(), alpha.value());
        return gradcheck::project(plus, wp) + gradcheck::project(minus, wm);
      };
      return detail::gradient_check(name, detail::worst_over({r, alpha}, obj, rng), tol);
    }
    case Component::Snr: {
      Var<double> f(random_tensor({2, 4, 3, 3}, rng, 1.5), true);
      const auto p = snr::make_params<double>(4, 2, rng);
      const auto we = random_tensor({2, 4, 3, 3}, rng), wc = random_tensor({2, 4, 3, 3}, rng);
      auto out = snr::snr_forward(f, p);
      backward(ops::add(gradcheck::project(out.enhanced, we), gradcheck::project(out.corrupted, wc)));
      auto obj = [&] {
        const auto o = snr::snr_forward(f.value(), p);
        return gradcheck::project(o.enhanced, we) + gradcheck::project(o.corrupted, wc);
      };
      std::vector<Var<double>> vars{f};
      for (auto& v : p.parameters()) vars.push_back(v);
      return detail::gradient_check(name, detail::worst_over(vars, obj, rng), tol);
    }
    case Component::DcLoss: {
      Var<double> a(random_tensor({1, 4, 3, 3}, rng), true), b(random_tensor({1, 4, 3, 3}, rng), true),
          c(random_tensor({1, 4, 3, 3}, rng), true);
      backward(snr::dual_causality_loss(a, b, c));
      auto obj = [&] { return snr::dual_causality_loss(a.value(), b.value(), c.value()); };
      return detail::gradient_check(name, detail::worst_over({a, b, c}, obj, rng), tol);
    }
    case Component::DwtLoss: {
      Var<double> f(random_tensor({2, 3, 4, 4}, rng), true);
      backward(isw::deep_whitening_loss(isw::covariance(f)));
      auto obj = [&] { return isw::deep_whitening_loss(isw::covariance(f.value())); };
      return detail::gradient_check(name, detail::worst_over({f}, obj, rng), tol);
    }
    case Component::IswLoss: {
      auto mask = isw::WhiteningMask::empty(4);
      mask.select(0, 1);
      mask.select(2, 3);
      mask.select(1, 3);
      Var<double> f(random_tensor({2, 4, 3, 3}, rng), true);
      backward(isw::isw_loss(isw::covariance(f), mask));
      auto obj = [&] { return isw::isw_loss(isw::covariance(f.value()), mask); };
      const double through_features = detail::worst_over({f}, obj, rng);
      Check direct = isw_loss_check(isw::covariance(f.value()), mask, tol);
      if (direct.skipped) return direct;
      return detail::gradient_check(name, std::max(through_features, direct.value), tol);
    }
    case Component::EndToEnd: {
      auto model = network::build_model<double>(detail::end_to_end_config(), seed);
      const auto x = random_tensor({2, 3, 16, 16}, rng);
      const auto xa = random_tensor({2, 3, 16, 16}, rng, 0.7);
      Tensor<int> y({2, 16, 16});
      for (auto& v : y.values()) v = rng.bernoulli(0.4) ? 1 : 0;
      std::vector<isw::WhiteningMask> masks;
      for (int s : model.config().srw_stages) {
        auto m = isw::WhiteningMask::empty(model.config().stage_channels[s - 1]);
        m.select(0, 1);
        m.select(1, 3);
        m.select(2, 3);
        masks.push_back(m);
      }
      model.zero_grad();
      backward(detail::end_to_end_objective(model, x, xa, y, masks));
      auto obj = [&] {
        NoGradGuard guard;
        return detail::end_to_end_objective(model, x, xa, y, masks).item();
      };
      std::vector<Var<double>> params;
      std::vector<Var<double>> heads;
      model.for_each_parameter([&](const std::string& n, Var<double>& v) {
        (n.find(".snr.") != std::string::npos ? heads : params).push_back(v);
      });
      // 20 sampled parameters: one entry of each of the first eight SNR head tensors, the rest spread out
      double worst = 0.0;
      int sampled = 0;
      for (std::size_t i = 0; i < heads.size() && sampled < 8; ++i, ++sampled) {
        auto& v = heads[i];
        worst = std::max(worst, gradcheck::max_relative_error(v.mutable_value(), v.grad(), obj,
                                                              {rng.below(v.value().size())}));
      }
      for (; sampled < 20; ++sampled) {
        auto& v = params[rng.below(params.size())];
        worst = std::max(worst, gradcheck::max_relative_error(v.mutable_value(), v.grad(), obj,
                                                              {rng.below(v.value().size())}));
      }
      return detail::gradient_check(name, worst, tol);
    }
  }
  return {"gradient", name, 0.0, tol, false, false, "unknown component"};
}

inline std::vector<Check> gradient_suite(std::uint64_t seed = 0) {
  std::vector<Check> out;
  for (const auto& [c, name] : components()) {
    const double tol = c == Component::EndToEnd ? kEndToEndTolerance : kComponentTolerance;
    out.push_back(finite_difference_check(c, seed + static_cast<std::uint64_t>(c), tol));
  }
  return out;
}

namespace detail {

inline Check count_check(const std::string& name, int failures, int trials) {
  Check c{"property", name, static_cast<double>(failures), 0.0, failures == 0, false, ""};
  c.detail = std::to_string(trials - failures) + "/" + std::to_string(trials) + " pass";
  return c;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Exhaustive minimum within-cluster SSE over all 2-partitions.
inline double brute_force_two_cluster_sse(const std::vector<double>& v) {
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

}  // namespace detail

inline Check restitution_partition_property(std::uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  for (int t = 0; t < kPropertyTrials; ++t) {
    const auto f = detail::random_tensor({2, 4, 3, 3}, rng, 1.0 + t % 5);
    const auto p = snr::make_params<double>(4, 2, rng, false);
    const auto o = snr::snr_forward(f, p);
    const double err = std::max(detail::max_abs_diff(o.residual_plus + o.residual_minus, f - o.normalized),
                                 detail::max_abs_diff(o.enhanced + o.residual_minus, f));
    bool alpha_ok = true;
    for (double a : o.alpha.values()) alpha_ok = alpha_ok && a >= 0.0 && a <= 1.0;
    failures += !(err < 1e-10 && alpha_ok);
  }
  return detail::count_check("restitution partition", failures, kPropertyTrials);
}

inline Check instance_norm_property(std::uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  for (int t = 0; t < kPropertyTrials; ++t) {
    const auto f = detail::random_tensor({2, 3, 4, 5}, rng, 1.0 + t % 7);
    const auto y = snr::instance_normalize(f);
    bool ok = true;
    for (int n = 0; n < 2; ++n) {
      for (int c = 0; c < 3; ++c) {
        const double* in = f.plane(n, c);
        const double* p = y.plane(n, c);
        double m = 0, v = 0, mi = 0, vi = 0;
        for (int k = 0; k < 20; ++k) m += p[k], mi += in[k];
        m /= 20, mi /= 20;
        for (int k = 0; k < 20; ++k) v += (p[k] - m) * (p[k] - m), vi += (in[k] - mi) * (in[k] - mi);
        v /= 20, vi /= 20;
        // exact post-condition with eps: var(y) = var(f) / (var(f) + eps)
        ok = ok && std::abs(m) < 1e-10 && std::abs(v - vi / (vi + snr::kDefaultEps)) < 1e-10;
      }
    }
    failures += !ok;
  }
  return detail::count_check("instance norm post-conditions", failures, kPropertyTrials);
}

inline Check entropy_bounds_property(std::uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  for (int t = 0; t < kPropertyTrials; ++t) {
    const int c = 2 + t % 6;
    const auto e = snr::pixel_entropy(detail::random_tensor({2, c, 3, 3}, rng, 1.0 + t % 10));
    bool ok = true;
    for (double v : e.values()) ok = ok && v >= 0.0 && v <= std::log(c) + 1e-12;
    failures += !ok;
  }
  return detail::count_check("entropy bounds [0, ln C]", failures, kPropertyTrials);
}

inline Check pair_variance_property(std::uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  for (int t = 0; t < kPropertyTrials; ++t) {
    const auto a = isw::covariance(detail::random_tensor({3, 4, 3, 3}, rng));
    const auto b = isw::covariance(detail::random_tensor({3, 4, 3, 3}, rng));
    const auto v = isw::pair_variance(a, b);
    bool ok = true;
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        // variance of the two-point sample {a, b} around its mean, averaged over the batch
        double closed = 0;
        for (int n = 0; n < 3; ++n) {
          const double mu = 0.5 * (a.at(n, i, j) + b.at(n, i, j));
          closed += 0.5 * (std::pow(a.at(n, i, j) - mu, 2) + std::pow(b.at(n, i, j) - mu, 2));
        }
        ok = ok && std::abs(v.at(i, j) - closed / 3) < 1e-10;
      }
    }
    failures += !ok;
  }
  return detail::count_check("pair variance closed form", failures, kPropertyTrials);
}

inline Check covariance_property(std::uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  for (int t = 0; t < kPropertyTrials; ++t) {
    const int c = 5;
    const auto theta = isw::covariance(detail::random_tensor({2, c, 3, 4}, rng, 1.0 + t % 4));
    bool ok = true;
    for (int n = 0; n < 2; ++n) {
      Eigen::MatrixXd m(c, c);
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = theta.at(n, i, j);
      ok = ok && (m - m.transpose()).cwiseAbs().maxCoeff() < 1e-12;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
      ok = ok && eig.eigenvalues().minCoeff() > -1e-10;
    }
    failures += !ok;
  }
  return detail::count_check("covariance symmetric PSD", failures, kPropertyTrials);
}

inline std::vector<Check> invariant_suite(std::uint64_t seed = 0) {
  return {restitution_partition_property(seed + 1), instance_norm_property(seed + 2),
          entropy_bounds_property(seed + 3), pair_variance_property(seed + 4), covariance_property(seed + 5)};
}

inline Check kmeans_oracle_property() {
  int failures = 0, trials = 0;
  for (std::uint64_t seed = 0; seed < kKMeansSeeds; ++seed) {
    Rng rng(seed);
    for (int n = 2; n <= 10; ++n) {
      std::vector<double> v(static_cast<std::size_t>(n));
      for (auto& x : v) x = seed % 2 ? rng.uniform() : std::exp(rng.normal());
      const auto r = isw::kmeans_1d(v, 2, isw::kDefaultKMeansIters, seed);
      const double got = isw::within_cluster_sse(v, r.assignments, 2);
      const double best = detail::brute_force_two_cluster_sse(v);
      failures += !(std::abs(got - best) <= 1e-12 * std::max(1.0, best));
      ++trials;
    }
  }
  return detail::count_check("kmeans_1d vs brute-force 2-partition", failures, trials);
}

struct WhiteningTrace {
  double initial = 0.0;  // mean |off-diagonal covariance| before optimization
  double final = 0.0;
  int steps = 0;
  double reduction() const { return initial > 0 ? 1.0 - final / initial : 0.0; }
};

inline double mean_abs_offdiag(const Tensor<double>& theta) {
  const int n = theta.dim(0), c = theta.dim(1);
  double s = 0.0;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j)
        if (i != j) s += std::abs(theta.at(b, i, j));
  return s / (static_cast<double>(n) * c * (c - 1));
}

/// Gradient descent on L_DWT over a learnable 1x1 channel mixing W applied to correlated
/// features; W starts at the identity.
inline WhiteningTrace whitening_efficacy(std::uint64_t seed, int steps = kWhiteningSteps, double lr0 = 0.25) {
  Rng rng(seed);
  const int n = 2, c = 6, hw = 16;
  Tensor<double> mix({c, c});
  for (int i = 0; i < c; ++i) {
    double norm = 0.0;
    for (int j = 0; j < c; ++j) {
      mix.at(i, j) = (i == j ? 1.0 : 0.0) + rng.normal();
      norm += mix.at(i, j) * mix.at(i, j);
    }
    for (int j = 0; j < c; ++j) mix.at(i, j) /= std::sqrt(norm);  // unit-variance rows
  }
  Tensor<double> x({n, c, hw, hw});
  for (int b = 0; b < n; ++b) {
    for (int p = 0; p < hw * hw; ++p) {
      std::vector<double> z(static_cast<std::size_t>(c));
      for (auto& v : z) v = rng.normal();
      for (int i = 0; i < c; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += mix.at(i, j) * z[static_cast<std::size_t>(j)];
        x.plane(b, i)[p] = s;
      }
    }
  }
  Tensor<double> w0({c, c, 1, 1});
  for (int i = 0; i < c; ++i) w0[static_cast<std::size_t>(i) * c + i] = 1.0;
  Var<double> w(w0, true);
  const Var<double> input(x);
  const kernels::ConvGeometry g{1, 1, 0, 1};
  auto theta_of = [&] { return isw::covariance(ops::conv2d<double>(input, w, nullptr, g)); };

  WhiteningTrace trace;
  trace.initial = mean_abs_offdiag(theta_of().value());
  for (int s = 0; s < steps; ++s) {
    w.zero_grad();
    backward(isw::deep_whitening_loss(theta_of()));
    const double lr = lr0 * (1.0 - static_cast<double>(s) / steps);
    Tensor<double>& wv = w.mutable_value();
    for (std::size_t k = 0; k < wv.size(); ++k) wv[k] -= lr * w.grad()[k];
  }
  trace.steps = steps;
  trace.final = mean_abs_offdiag(theta_of().value());
  return trace;
}

inline Check whitening_efficacy_property(std::uint64_t seed = 0) {
  const auto t = whitening_efficacy(seed);
  Check c{"property", "whitening efficacy", t.reduction(), kWhiteningTarget, t.reduction() >= kWhiteningTarget, false,
          ""};
  char buf[128];
  std::snprintf(buf, sizeof buf, "mean |offdiag| %.4f -> %.4f (%.1f%% in %d steps)", t.initial, t.final,
                100.0 * t.reduction(), t.steps);
  c.detail = buf;
  return c;
}

inline std::vector<Check> run_all(std::uint64_t seed = 0) {
  auto out = gradient_suite(seed);
  for (auto& c : invariant_suite(seed)) out.push_back(std::move(c));
  out.push_back(kmeans_oracle_property());
  out.push_back(whitening_efficacy_property(seed));
  return out;
}

inline bool all_passed(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

inline std::string format_table(const std::vector<Check>& checks) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-9s %-38s %-6s %s\n", "group", "check", "result", "detail");
  out += line;
  for (const auto& c : checks) {
    const char* verdict = c.skipped ? "SKIP" : (c.passed ? "PASS" : "FAIL");
    std::snprintf(line, sizeof line, "%-9s %-38s %-6s %s\n", c.group.c_str(), c.name.c_str(), verdict,
                  c.detail.c_str());
    out += line;
  }
  return out;
}

}  // namespace srwseg::selftest
