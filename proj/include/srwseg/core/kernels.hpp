#pragma once

// Forward and vector-Jacobian kernels for the dense layers of the network. These are plain
// functions on tensors; ops.hpp wires them into the autograd tape.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "srwseg/core/tensor.hpp"

namespace srwseg::kernels {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int dilation = 1;

  int out_extent(int in) const { return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

/// Output columns [lo, hi) whose input column ox * stride - padding + offset lies inside [0, w).
inline void valid_span(int wo, int w, int stride, int shift, int& lo, int& hi) {
  lo = shift >= 0 ? 0 : std::min(wo, (-shift + stride - 1) / stride);
  hi = w - 1 - shift < 0 ? 0 : std::min(wo, (w - 1 - shift) / stride + 1);
  if (hi < lo) hi = lo;
}

/// Unfolds one (C, H, W) image into rows of a column matrix with leading dimension `ld`:
/// row (c, ky, kx) holds the Ho*Wo taps starting at col + row * ld.
template <class T>
void im2col(const T* img, int channels, int h, int w, const ConvGeometry& g, int ho, int wo, T* col, std::size_t ld) {
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ld;
        const int shift = kx * g.dilation - g.padding;
        int lo, hi;
        valid_span(wo, w, g.stride, shift, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ky * g.dilation;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T{});
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * h + iy) * w + shift;
          std::fill(dst, dst + lo, T{});
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + wo, T{});
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back into the image gradient.
template <class T>
void col2im(const T* col, int channels, int h, int w, const ConvGeometry& g, int ho, int wo, T* img, std::size_t ld) {
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ld;
        const int shift = kx * g.dilation - g.padding;
        int lo, hi;
        valid_span(wo, w, g.stride, shift, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ky * g.dilation;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<std::size_t>(c) * h + iy) * w + shift;
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

/// Column matrix of the whole batch: (Cin*k*k, N*Ho*Wo), sample s in columns [s*hw, (s+1)*hw).
template <class T>
void batch_columns(const Tensor<T>& x, const ConvGeometry& g, int ho, int wo, std::vector<T>& col) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(ho) * wo, ld = hw * n;
  col.resize(static_cast<std::size_t>(cin) * g.kernel * g.kernel * ld);
  for (int s = 0; s < n; ++s) {
    const T* img = x.data() + static_cast<std::size_t>(s) * cin * h * w;
    if (g.is_pointwise()) {
      for (int c = 0; c < cin; ++c) std::copy(img + c * hw, img + (c + 1) * hw, col.data() + c * ld + s * hw);
    } else {
      im2col(img, cin, h, w, g, ho, wo, col.data() + s * hw, ld);
    }
  }
}

/// x: (N, Cin, H, W); weight: (Cout, Cin, k, k); bias: (Cout) or empty.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, const ConvGeometry& g) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0);
  if (weight.dim(1) != cin || weight.dim(2) != g.kernel || weight.dim(3) != g.kernel) {
    throw ValidationError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                          to_string(x.shape()));
  }
  const int ho = g.out_extent(h), wo = g.out_extent(w);
  if (ho < 1 || wo < 1) throw ValidationError("conv2d: input " + to_string(x.shape()) + " too small");
  Tensor<T> y({n, cout, ho, wo});
  const int kdim = cin * g.kernel * g.kernel;
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  std::vector<T> col;
  batch_columns(x, g, ho, wo, col);
  RowMatrix<T> out = ConstMatMap<T>(weight.data(), cout, kdim) * ConstMatMap<T>(col.data(), kdim, hw * n);
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < cout; ++c) {
      const T* src = out.data() + static_cast<std::size_t>(c) * hw * n + s * hw;
      T* dst = y.data() + (static_cast<std::size_t>(s) * cout + c) * hw;
      const T b = bias ? (*bias)[c] : T{};
      for (std::size_t k = 0; k < hw; ++k) dst[k] = src[k] + b;
    }
  }
  return y;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const ConvGeometry& g, const Tensor<T>& gy,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0);
  const int ho = gy.dim(2), wo = gy.dim(3);
  const int kdim = cin * g.kernel * g.kernel;
  const std::size_t hw = static_cast<std::size_t>(ho) * wo, ld = hw * n;

  // (Cout, N*hw) view of the output gradient
  RowMatrix<T> gout(cout, static_cast<Eigen::Index>(ld));
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < cout; ++c) {
      const T* src = gy.data() + (static_cast<std::size_t>(s) * cout + c) * hw;
      std::copy(src, src + hw, gout.data() + c * ld + s * hw);
    }
  }
  if (gb) {
    for (int c = 0; c < cout; ++c) (*gb)[c] += gout.row(c).sum();
  }
  if (gw) {
    std::vector<T> col;
    batch_columns(x, g, ho, wo, col);
    MatMap<T>(gw->data(), cout, kdim).noalias() += gout * ConstMatMap<T>(col.data(), kdim, ld).transpose();
  }
  if (gx) {
    RowMatrix<T> gcol = ConstMatMap<T>(weight.data(), cout, kdim).transpose() * gout;
    for (int s = 0; s < n; ++s) {
      T* gimg = gx->data() + static_cast<std::size_t>(s) * cin * h * w;
      if (g.is_pointwise()) {
        for (int c = 0; c < cin; ++c) {
          const T* src = gcol.data() + c * ld + s * hw;
          for (std::size_t k = 0; k < hw; ++k) gimg[c * hw + k] += src[k];
        }
      } else {
        col2im(gcol.data() + s * hw, cin, h, w, g, ho, wo, gimg, ld);
      }
    }
  }
}

/// Per-channel statistics gathered by batch normalization in training mode.
template <class T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> inv_std;
  std::vector<T> var;  // biased
};

/// Normalizes over (N, H, W) per channel; returns y and fills `stats` with the batch moments.
template <class T>
Tensor<T> batchnorm_train_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                                  BatchStats<T>& stats) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.plane_size();
  const double count = static_cast<double>(n) * hw;
  stats.mean.assign(c, T{});
  stats.inv_std.assign(c, T{});
  stats.var.assign(c, T{});
  Tensor<T> y(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
    }
    const double mean = s / count;
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) {
        const double d = p[k] - mean;
        ss += d * d;
      }
    }
    const double var = ss / count;
    const double inv = 1.0 / std::sqrt(var + eps);
    stats.mean[ch] = static_cast<T>(mean);
    stats.var[ch] = static_cast<T>(var);
    stats.inv_std[ch] = static_cast<T>(inv);
    const T a = static_cast<T>(gamma[ch] * inv);
    const T b = static_cast<T>(beta[ch] - gamma[ch] * mean * inv);
    for (int i = 0; i < n; ++i) {
      const T* p = x.plane(i, ch);
      T* q = y.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) q[k] = a * p[k] + b;
    }
  }
  return y;
}

template <class T>
void batchnorm_train_backward(const Tensor<T>& x, const Tensor<T>& gamma, const BatchStats<T>& stats,
                              const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.plane_size();
  const double count = static_cast<double>(n) * hw;
  for (int ch = 0; ch < c; ++ch) {
    const double mean = stats.mean[ch], inv = stats.inv_std[ch];
    double sg = 0.0, sgx = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.plane(i, ch);
      const T* g = gy.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) {
        sg += g[k];
        sgx += g[k] * (p[k] - mean) * inv;
      }
    }
    if (ggamma) (*ggamma)[ch] += static_cast<T>(sgx);
    if (gbeta) (*gbeta)[ch] += static_cast<T>(sg);
    if (gx) {
      const double mg = sg / count, mgx = sgx / count;
      const double scale = gamma[ch] * inv;
      for (int i = 0; i < n; ++i) {
        const T* p = x.plane(i, ch);
        const T* g = gy.plane(i, ch);
        T* q = gx->plane(i, ch);
        for (std::size_t k = 0; k < hw; ++k) {
          const double xhat = (p[k] - mean) * inv;
          q[k] += static_cast<T>(scale * (g[k] - mg - xhat * mgx));
        }
      }
    }
  }
}

/// Affine map with frozen statistics: y = gamma * (x - mean) / sqrt(var + eps) + beta.
template <class T>
Tensor<T> batchnorm_eval_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                 const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.plane_size();
  Tensor<T> y(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps));
    const T a = gamma[ch] * inv;
    const T b = beta[ch] - gamma[ch] * running_mean[ch] * inv;
    for (int i = 0; i < n; ++i) {
      const T* p = x.plane(i, ch);
      T* q = y.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) q[k] = a * p[k] + b;
    }
  }
  return y;
}

/// Bilinear resampling with half-pixel centers (align_corners = false).
struct ResizeTap {
  int i0, i1;
  double w0, w1;
};

inline std::vector<ResizeTap> resize_taps(int in, int out) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = src - i0;
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}

template <class T>
Tensor<T> resize_bilinear_forward(const Tensor<T>& x, int out_h, int out_w) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  Tensor<T> y({n, c, out_h, out_w});
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* p = x.plane(i, ch);
      T* q = y.plane(i, ch);
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        const T* r0 = p + static_cast<std::size_t>(a.i0) * w;
        const T* r1 = p + static_cast<std::size_t>(a.i1) * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const double top = b.w0 * r0[b.i0] + b.w1 * r0[b.i1];
          const double bot = b.w0 * r1[b.i0] + b.w1 * r1[b.i1];
          q[static_cast<std::size_t>(oy) * out_w + ox] = static_cast<T>(a.w0 * top + a.w1 * bot);
        }
      }
    }
  }
  return y;
}

template <class T>
void resize_bilinear_backward(const Tensor<T>& gy, Tensor<T>& gx) {
  const int n = gx.dim(0), c = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
  const int out_h = gy.dim(2), out_w = gy.dim(3);
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* g = gy.plane(i, ch);
      T* q = gx.plane(i, ch);
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        T* r0 = q + static_cast<std::size_t>(a.i0) * w;
        T* r1 = q + static_cast<std::size_t>(a.i1) * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const double v = g[static_cast<std::size_t>(oy) * out_w + ox];
          r0[b.i0] += static_cast<T>(a.w0 * b.w0 * v);
          r0[b.i1] += static_cast<T>(a.w0 * b.w1 * v);
          r1[b.i0] += static_cast<T>(a.w1 * b.w0 * v);
          r1[b.i1] += static_cast<T>(a.w1 * b.w1 * v);
        }
      }
    }
  }
}

}  // namespace srwseg::kernels
