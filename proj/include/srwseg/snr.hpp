#pragma once

// Style normalization and restitution.
//
// Instance normalization strips per-channel style statistics from a feature map F. The
// removed residual R = F - IN(F) is split by a channel attention vector alpha into a
// task-relevant part R+ = alpha * R, which is added back (enhanced features), and its
// complement R- = (1 - alpha) * R, which yields the corrupted features used only by the
// dual causality loss. That loss asks the enhanced map to have lower pixel entropy than the
// normalized map and the corrupted map to have higher entropy.

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

#include "srwseg/core/ops.hpp"
#include "srwseg/core/rng.hpp"

namespace srwseg::snr {

inline constexpr double kDefaultEps = 1e-5;
inline constexpr int kDefaultReduction = 16;

/// Bottleneck reduction actually used for C channels: min(r, C / 4), floored at 1.
inline int effective_reduction(int channels, int reduction) {
  return std::max(1, std::min(reduction, channels / 4));
}

inline int hidden_width(int channels, int reduction) {
  return std::max(1, channels / effective_reduction(channels, reduction));
}

/// Attention head weights. Row-vector convention: hidden = relu(gap(R) fc1_w + fc1_b),
/// logits = hidden fc2_w + fc2_b, alpha = sigmoid(logits).
template <class T>
struct SnrParams {
  Var<T> fc1_w;  // (C, hidden)
  Var<T> fc1_b;  // (hidden)
  Var<T> fc2_w;  // (hidden, C)
  Var<T> fc2_b;  // (C)
  T eps = static_cast<T>(kDefaultEps);
  bool batch_shared = false;

  int channels() const { return fc1_w.dim(0); }
  int hidden() const { return fc1_w.dim(1); }

  void validate() const {
    if (!(eps > T{})) throw ValidationError("snr: eps must be positive");
    const int c = channels(), h = hidden();
    if (fc1_b.value().size() != static_cast<std::size_t>(h) || fc2_w.dim(0) != h || fc2_w.dim(1) != c ||
        fc2_b.value().size() != static_cast<std::size_t>(c)) {
      throw ValidationError("snr: inconsistent attention parameter shapes");
    }
  }

  std::vector<Var<T>> parameters() const { return {fc1_w, fc1_b, fc2_w, fc2_b}; }
};

/// He-style fan-in initialization for the attention FCs, zero biases.
template <class T>
SnrParams<T> make_params(int channels, int reduction, Rng& rng, bool trainable = true) {
  if (channels < 1 || reduction < 1) throw ValidationError("snr: channels and reduction must be positive");
  const int h = hidden_width(channels, reduction);
  SnrParams<T> p;
  auto init = [&](int fan_in, int rows, int cols) {
    Tensor<T> w({rows, cols});
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& v : w.values()) v = static_cast<T>(std * rng.normal());
    return w;
  };
  p.fc1_w = Var<T>(init(channels, channels, h), trainable);
  p.fc1_b = Var<T>(Tensor<T>({h}), trainable);
  p.fc2_w = Var<T>(init(h, h, channels), trainable);
  p.fc2_b = Var<T>(Tensor<T>({channels}), trainable);
  return p;
}

/// All-zero attention head (alpha = 0.5 everywhere).
template <class T>
SnrParams<T> zero_params(int channels, int hidden) {
  SnrParams<T> p;
  p.fc1_w = Var<T>(Tensor<T>({channels, hidden}));
  p.fc1_b = Var<T>(Tensor<T>({hidden}));
  p.fc2_w = Var<T>(Tensor<T>({hidden, channels}));
  p.fc2_b = Var<T>(Tensor<T>({channels}));
  return p;
}

// ---------------------------------------------------------------------------------------
// Instance normalization (no affine)

template <class T>
Var<T> instance_normalize(const Var<T>& f, T eps) {
  require_rank(f.value(), 4, "instance_normalize");
  if (!(eps > T{})) throw ValidationError("instance_normalize: eps must be positive");
  const int n = f.dim(0), c = f.dim(1);
  const std::size_t hw = f.value().plane_size();
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * c);
  Tensor<T> y(f.shape());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* p = f.value().plane(i, ch);
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      const double mean = s / hw;
      double ss = 0.0;
      for (std::size_t k = 0; k < hw; ++k) ss += (p[k] - mean) * (p[k] - mean);
      const double inv = 1.0 / std::sqrt(ss / hw + eps);
      (*inv_std)[static_cast<std::size_t>(i) * c + ch] = inv;
      T* q = y.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) q[k] = static_cast<T>((p[k] - mean) * inv);
    }
  }
  return make_op<T>(std::move(y), {f}, [inv_std](Node<T>& self) {
    auto& pf = *self.parents[0];
    auto& gx = pf.grad_buffer();
    const int n = gx.dim(0), c = gx.dim(1);
    const std::size_t hw = gx.plane_size();
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const T* g = self.grad.plane(i, ch);
        const T* xhat = self.value.plane(i, ch);
        double sg = 0.0, sgx = 0.0;
        for (std::size_t k = 0; k < hw; ++k) {
          sg += g[k];
          sgx += static_cast<double>(g[k]) * xhat[k];
        }
        const double mg = sg / hw, mgx = sgx / hw;
        const double inv = (*inv_std)[static_cast<std::size_t>(i) * c + ch];
        T* q = gx.plane(i, ch);
        for (std::size_t k = 0; k < hw; ++k) q[k] += static_cast<T>(inv * (g[k] - mg - xhat[k] * mgx));
      }
    }
  });
}

/// Per (sample, channel) standardization over spatial positions.
template <class T>
Tensor<T> instance_normalize(const Tensor<T>& f, T eps = static_cast<T>(kDefaultEps)) {
  require_feature_map(f, "instance_normalize");
  NoGradGuard guard;
  return instance_normalize(Var<T>(f), eps).value();
}

// ---------------------------------------------------------------------------------------
// Channel attention and restitution

template <class T>
Var<T> channel_attention(const Var<T>& residual, const SnrParams<T>& params) {
  require_rank(residual.value(), 4, "channel_attention");
  params.validate();
  if (residual.dim(1) != params.channels()) {
    throw ValidationError("channel_attention: residual has " + std::to_string(residual.dim(1)) +
                          " channels, attention head expects " + std::to_string(params.channels()));
  }
  Var<T> pooled = ops::global_avg_pool(residual);
  if (params.batch_shared) pooled = ops::batch_mean_rows(pooled);
  Var<T> hidden = ops::relu(ops::linear(pooled, params.fc1_w, params.fc1_b));
  return ops::sigmoid(ops::linear(hidden, params.fc2_w, params.fc2_b));
}

/// Attention vector per sample, shape (N, C), entries in (0, 1).
template <class T>
Tensor<T> channel_attention(const Tensor<T>& residual, const SnrParams<T>& params) {
  require_feature_map(residual, "channel_attention");
  NoGradGuard guard;
  return channel_attention(Var<T>(residual), params).value();
}

template <class T>
void check_attention(const Tensor<T>& alpha, const Tensor<T>& residual) {
  if (alpha.rank() != 2 || alpha.dim(0) != residual.dim(0) || alpha.dim(1) != residual.dim(1)) {
    throw ValidationError("restitution_split: attention " + to_string(alpha.shape()) + " does not match residual " +
                          to_string(residual.shape()));
  }
  for (T a : alpha.values()) {
    // Saturated sigmoids legitimately reach the closed bounds; anything else is a broken head.
    if (!(a >= T{} && a <= T{1})) {
      throw ValidationError("restitution_split: attention value outside [0, 1]");
    }
  }
}

template <class T>
struct RestitutionVars {
  Var<T> plus;
  Var<T> minus;
};

template <class T>
RestitutionVars<T> restitution_split(const Var<T>& residual, const Var<T>& alpha) {
  require_rank(residual.value(), 4, "restitution_split");
  check_attention(alpha.value(), residual.value());
  return {ops::scale_channels(residual, alpha), ops::scale_channels(residual, ops::one_minus(alpha))};
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> restitution_split(const Tensor<T>& residual, const Tensor<T>& alpha) {
  require_feature_map(residual, "restitution_split");
  NoGradGuard guard;
  auto out = restitution_split(Var<T>(residual), Var<T>(alpha));
  return {out.plus.value(), out.minus.value()};
}

// ---------------------------------------------------------------------------------------
// Full block

template <class T>
struct SnrVars {
  Var<T> normalized;
  Var<T> enhanced;
  Var<T> corrupted;
  Var<T> residual_plus;
  Var<T> residual_minus;
  Var<T> alpha;
};

template <class T>
struct SnrOutput {
  Tensor<T> normalized;
  Tensor<T> enhanced;
  Tensor<T> corrupted;
  Tensor<T> residual_plus;
  Tensor<T> residual_minus;
  Tensor<T> alpha;
};

template <class T>
SnrVars<T> snr_forward(const Var<T>& f, const SnrParams<T>& params) {
  SnrVars<T> out;
  out.normalized = instance_normalize(f, params.eps);
  Var<T> residual = ops::sub(f, out.normalized);
  out.alpha = channel_attention(residual, params);
  auto split = restitution_split(residual, out.alpha);
  out.residual_plus = split.plus;
  out.residual_minus = split.minus;
  out.enhanced = ops::add(out.normalized, out.residual_plus);
  out.corrupted = ops::add(out.normalized, out.residual_minus);
  return out;
}

template <class T>
SnrOutput<T> snr_forward(const Tensor<T>& f, const SnrParams<T>& params) {
  require_feature_map(f, "snr_forward");
  NoGradGuard guard;
  auto v = snr_forward(Var<T>(f), params);
  return {v.normalized.value(),    v.enhanced.value(),       v.corrupted.value(),
          v.residual_plus.value(), v.residual_minus.value(), v.alpha.value()};
}

// ---------------------------------------------------------------------------------------
// Entropy and the dual causality loss

/// ln(1 + exp(x)) in the overflow-safe form max(x, 0) + ln(1 + exp(-|x|)).
inline double margin_loss(double x) {
  if (!std::isfinite(x)) throw ValidationError("margin_loss: non-finite input");
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

/// d/dx margin_loss(x) = sigmoid(x).
inline double margin_loss_grad(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

namespace detail {

/// Entropy of softmax over channels at one pixel; optionally writes dH/dz into `grad`
/// (strided by plane size, same layout as the input).
template <class T>
double softmax_entropy(const T* z, int channels, std::size_t stride, std::vector<double>& p, T* grad, double scale) {
  double m = -INFINITY;
  for (int c = 0; c < channels; ++c) m = std::max(m, static_cast<double>(z[c * stride]));
  double s = 0.0;
  for (int c = 0; c < channels; ++c) {
    p[c] = std::exp(z[c * stride] - m);
    s += p[c];
  }
  const double log_s = std::log(s);
  double h = 0.0;
  for (int c = 0; c < channels; ++c) {
    const double logp = z[c * stride] - m - log_s;
    p[c] /= s;
    h -= p[c] * logp;
  }
  if (grad) {
    // dH/dz_c = -p_c (ln p_c + H)
    for (int c = 0; c < channels; ++c) {
      const double logp = z[c * stride] - m - log_s;
      grad[c * stride] += static_cast<T>(scale * (-p[c] * (logp + h)));
    }
  }
  return std::max(h, 0.0);
}

/// Spatial mean of pixel entropy for sample i.
template <class T>
double mean_entropy(const Tensor<T>& f, int i, std::vector<double>& p) {
  const int c = f.dim(1);
  const std::size_t hw = f.plane_size();
  const T* base = f.plane(i, 0);
  double acc = 0.0;
  for (std::size_t k = 0; k < hw; ++k) acc += softmax_entropy<T>(base + k, c, hw, p, nullptr, 0.0);
  return acc / hw;
}

template <class T>
void mean_entropy_grad(const Tensor<T>& f, int i, double scale, Tensor<T>& grad, std::vector<double>& p) {
  const int c = f.dim(1);
  const std::size_t hw = f.plane_size();
  const T* base = f.plane(i, 0);
  T* g = grad.plane(i, 0);
  for (std::size_t k = 0; k < hw; ++k) softmax_entropy<T>(base + k, c, hw, p, g + k, scale / hw);
}

}  // namespace detail

/// Per-pixel entropy of the channel softmax, shape (N, H, W), values in [0, ln C].
template <class T>
Tensor<T> pixel_entropy(const Tensor<T>& f) {
  require_feature_map(f, "pixel_entropy");
  if (f.dim(1) < 2) throw ValidationError("pixel_entropy: needs at least 2 channels");
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const std::size_t hw = f.plane_size();
  Tensor<T> out({n, h, w});
  std::vector<double> p(static_cast<std::size_t>(c));
  for (int i = 0; i < n; ++i) {
    const T* base = f.plane(i, 0);
    for (std::size_t k = 0; k < hw; ++k) {
      out[static_cast<std::size_t>(i) * hw + k] = static_cast<T>(detail::softmax_entropy<T>(base + k, c, hw, p, nullptr, 0.0));
    }
  }
  return out;
}

/// L_dc = mean over batch of margin(mean_px[E(enh) - E(norm)]) + margin(mean_px[E(norm) - E(corr)]).
template <class T>
Var<T> dual_causality_loss(const Var<T>& enhanced, const Var<T>& normalized, const Var<T>& corrupted) {
  if (enhanced.shape() != normalized.shape() || normalized.shape() != corrupted.shape()) {
    throw ValidationError("dual_causality_loss: shape mismatch " + to_string(enhanced.shape()) + ", " +
                          to_string(normalized.shape()) + ", " + to_string(corrupted.shape()));
  }
  require_rank(enhanced.value(), 4, "dual_causality_loss");
  if (enhanced.dim(1) < 2) throw ValidationError("dual_causality_loss: needs at least 2 channels");
  const int n = enhanced.dim(0);
  std::vector<double> p(static_cast<std::size_t>(enhanced.dim(1)));
  auto args = std::make_shared<std::vector<std::pair<double, double>>>();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e_enh = detail::mean_entropy(enhanced.value(), i, p);
    const double e_norm = detail::mean_entropy(normalized.value(), i, p);
    const double e_corr = detail::mean_entropy(corrupted.value(), i, p);
    const double plus = e_enh - e_norm;
    const double minus = e_norm - e_corr;
    args->emplace_back(plus, minus);
    total += margin_loss(plus) + margin_loss(minus);
  }
  Tensor<T> y({1}, static_cast<T>(total / n));
  return make_op<T>(std::move(y), {enhanced, normalized, corrupted}, [args](Node<T>& self) {
    auto& pe = *self.parents[0];
    auto& pn = *self.parents[1];
    auto& pc = *self.parents[2];
    const int n = pe.value.dim(0);
    std::vector<double> p(static_cast<std::size_t>(pe.value.dim(1)));
    const double g0 = static_cast<double>(self.grad[0]) / n;
    for (int i = 0; i < n; ++i) {
      const double dp = g0 * margin_loss_grad((*args)[i].first);
      const double dm = g0 * margin_loss_grad((*args)[i].second);
      if (pe.requires_grad) detail::mean_entropy_grad(pe.value, i, dp, pe.grad_buffer(), p);
      if (pn.requires_grad) detail::mean_entropy_grad(pn.value, i, dm - dp, pn.grad_buffer(), p);
      if (pc.requires_grad) detail::mean_entropy_grad(pc.value, i, -dm, pc.grad_buffer(), p);
    }
  });
}

template <class T>
double dual_causality_loss(const Tensor<T>& enhanced, const Tensor<T>& normalized, const Tensor<T>& corrupted) {
  NoGradGuard guard;
  return dual_causality_loss(Var<T>(enhanced), Var<T>(normalized), Var<T>(corrupted)).item();
}

}  // namespace srwseg::snr
