#pragma once

// Differentiable operations on Var. Each wrapper computes its value eagerly and, when
// recording, registers the matching vector-Jacobian product.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "srwseg/core/autograd.hpp"
#include "srwseg/core/kernels.hpp"

namespace srwseg::ops {

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(a.value() - b.value(), {a, b}, [](Node<T>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad * T{-1});
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return make_op<T>(a.value() * s, {a}, [s](Node<T>& self) { self.parents[0]->accumulate(self.grad * s); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v = v > T{} ? v : T{};
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const auto& in = self.parents[0]->value;
    Tensor<T> g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(in[i] > T{})) g[i] = T{};
    }
    self.parents[0]->accumulate(g);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  auto out = make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    Tensor<T> g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.value[i];
      g[i] *= s * (T{1} - s);
    }
    self.parents[0]->accumulate(g);
  });
  return out;
}

/// 1 - x, elementwise.
template <class T>
Var<T> one_minus(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v = T{1} - v;
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) { self.parents[0]->accumulate(self.grad * T{-1}); });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, const kernels::ConvGeometry& g) {
  Tensor<T> y = kernels::conv2d_forward(x.value(), weight.value(), bias ? &bias->value() : nullptr, g);
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_op<T>(std::move(y), std::move(inputs), [g, has_bias](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    Tensor<T>* gx = px.requires_grad ? &px.grad_buffer() : nullptr;
    Tensor<T>* gw = pw.requires_grad ? &pw.grad_buffer() : nullptr;
    Tensor<T>* gb = nullptr;
    if (has_bias && self.parents[2]->requires_grad) gb = &self.parents[2]->grad_buffer();
    kernels::conv2d_backward(px.value, pw.value, g, self.grad, gx, gw, gb);
  });
}

/// Batch normalization using the statistics of `x` itself; `stats` receives them.
template <class T>
Var<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                       kernels::BatchStats<T>& stats) {
  auto shared = std::make_shared<kernels::BatchStats<T>>();
  Tensor<T> y = kernels::batchnorm_train_forward(x.value(), gamma.value(), beta.value(), eps, *shared);
  stats = *shared;
  return make_op<T>(std::move(y), {x, gamma, beta}, [shared](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    kernels::batchnorm_train_backward(px.value, pg.value, *shared, self.grad,
                                      px.requires_grad ? &px.grad_buffer() : nullptr,
                                      pg.requires_grad ? &pg.grad_buffer() : nullptr,
                                      pb.requires_grad ? &pb.grad_buffer() : nullptr);
  });
}

template <class T>
Var<T> batchnorm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& running_mean,
                      const Tensor<T>& running_var, T eps) {
  Tensor<T> y = kernels::batchnorm_eval_forward(x.value(), gamma.value(), beta.value(), running_mean, running_var, eps);
  return make_op<T>(std::move(y), {x, gamma, beta}, [running_mean, running_var, eps](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const int n = px.value.dim(0), c = px.value.dim(1);
    const std::size_t hw = px.value.plane_size();
    for (int ch = 0; ch < c; ++ch) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
      double sg = 0.0, sgx = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* g = self.grad.plane(i, ch);
        const T* p = px.value.plane(i, ch);
        for (std::size_t k = 0; k < hw; ++k) {
          sg += g[k];
          sgx += g[k] * (p[k] - running_mean[ch]) * inv;
        }
        if (px.requires_grad) {
          T* q = px.grad_buffer().plane(i, ch);
          const T a = static_cast<T>(pg.value[ch] * inv);
          for (std::size_t k = 0; k < hw; ++k) q[k] += a * g[k];
        }
      }
      if (pg.requires_grad) pg.grad_buffer()[ch] += static_cast<T>(sgx);
      if (pb.requires_grad) pb.grad_buffer()[ch] += static_cast<T>(sg);
    }
  });
}

template <class T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w) {
  if (x.dim(2) == out_h && x.dim(3) == out_w) return x;
  return make_op<T>(kernels::resize_bilinear_forward(x.value(), out_h, out_w), {x}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    kernels::resize_bilinear_backward(self.grad, px.grad_buffer());
  });
}

/// Concatenates rank-4 tensors along the channel axis.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  const int n = parts.at(0).dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int c = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw ValidationError("concat_channels: incompatible shape " + to_string(p.shape()));
    }
    c += p.dim(1);
  }
  Tensor<T> y({n, c, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  int offset = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < p.dim(1); ++ch) std::copy_n(p.value().plane(i, ch), hw, y.plane(i, offset + ch));
    }
    offset += p.dim(1);
  }
  return make_op<T>(std::move(y), parts, [](Node<T>& self) {
    const int n = self.value.dim(0);
    const std::size_t hw = self.value.plane_size();
    int offset = 0;
    for (auto& parent : self.parents) {
      const int pc = parent->value.dim(1);
      if (parent->requires_grad) {
        auto& g = parent->grad_buffer();
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < pc; ++ch) {
            const T* src = self.grad.plane(i, offset + ch);
            T* dst = g.plane(i, ch);
            for (std::size_t k = 0; k < hw; ++k) dst[k] += src[k];
          }
        }
      }
      offset += pc;
    }
  });
}

/// (N, C, H, W) -> (N, C): spatial mean.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.value().plane_size();
  Tensor<T> y({n, c});
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* p = x.value().plane(i, ch);
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      y.at(i, ch) = static_cast<T>(s / hw);
    }
  }
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& g = px.grad_buffer();
    const int n = g.dim(0), c = g.dim(1);
    const std::size_t hw = g.plane_size();
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const T v = static_cast<T>(self.grad.at(i, ch) / static_cast<double>(hw));
        T* q = g.plane(i, ch);
        for (std::size_t k = 0; k < hw; ++k) q[k] += v;
      }
    }
  });
}

/// (N, C) -> (1, C) mean over rows, broadcast back to (N, C).
template <class T>
Var<T> batch_mean_rows(const Var<T>& x) {
  const int n = x.dim(0), c = x.dim(1);
  Tensor<T> y({n, c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x.value().at(i, ch);
    for (int i = 0; i < n; ++i) y.at(i, ch) = static_cast<T>(s / n);
  }
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const int n = self.value.dim(0), c = self.value.dim(1);
    Tensor<T> g({n, c});
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += self.grad.at(i, ch);
      for (int i = 0; i < n; ++i) g.at(i, ch) = static_cast<T>(s / n);
    }
    self.parents[0]->accumulate(g);
  });
}

/// (N, C) -> (N, C, H, W) by spatial replication.
template <class T>
Var<T> broadcast_spatial(const Var<T>& x, int h, int w) {
  const int n = x.dim(0), c = x.dim(1);
  Tensor<T> y({n, c, h, w});
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) std::fill_n(y.plane(i, ch), y.plane_size(), x.value().at(i, ch));
  }
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    const int n = self.value.dim(0), c = self.value.dim(1);
    const std::size_t hw = self.value.plane_size();
    Tensor<T> g({n, c});
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const T* p = self.grad.plane(i, ch);
        double s = 0.0;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
        g.at(i, ch) = static_cast<T>(s);
      }
    }
    self.parents[0]->accumulate(g);
  });
}

/// Row-vector affine map: y = x W + b with x (N, in), W (in, out), b (out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const int n = x.dim(0), in = x.dim(1), out = weight.dim(1);
  if (weight.dim(0) != in || bias.value().size() != static_cast<std::size_t>(out)) {
    throw ValidationError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                          to_string(weight.shape()) + " and bias " + to_string(bias.shape()));
  }
  Tensor<T> y({n, out});
  kernels::MatMap<T>(y.data(), n, out).noalias() =
      kernels::ConstMatMap<T>(x.value().data(), n, in) * kernels::ConstMatMap<T>(weight.value().data(), in, out);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < out; ++j) y.at(i, j) += bias.value()[j];
  }
  return make_op<T>(std::move(y), {x, weight, bias}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const int n = px.value.dim(0), in = px.value.dim(1), out = pw.value.dim(1);
    kernels::ConstMatMap<T> g(self.grad.data(), n, out);
    if (px.requires_grad) {
      kernels::MatMap<T>(px.grad_buffer().data(), n, in).noalias() +=
          g * kernels::ConstMatMap<T>(pw.value.data(), in, out).transpose();
    }
    if (pw.requires_grad) {
      kernels::MatMap<T>(pw.grad_buffer().data(), in, out).noalias() +=
          kernels::ConstMatMap<T>(px.value.data(), n, in).transpose() * g;
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < out; ++j) gb[j] += self.grad.at(i, j);
      }
    }
  });
}

/// Scales every (n, c) plane of x (N, C, H, W) by s(n, c).
template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  const int n = x.dim(0), c = x.dim(1);
  if (s.rank() != 2 || s.dim(0) != n || s.dim(1) != c) {
    throw ValidationError("scale_channels: scale " + to_string(s.shape()) + " incompatible with " +
                          to_string(x.shape()));
  }
  Tensor<T> y(x.shape());
  const std::size_t hw = x.value().plane_size();
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T a = s.value().at(i, ch);
      const T* p = x.value().plane(i, ch);
      T* q = y.plane(i, ch);
      for (std::size_t k = 0; k < hw; ++k) q[k] = a * p[k];
    }
  }
  return make_op<T>(std::move(y), {x, s}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    const int n = px.value.dim(0), c = px.value.dim(1);
    const std::size_t hw = px.value.plane_size();
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const T* g = self.grad.plane(i, ch);
        const T* p = px.value.plane(i, ch);
        if (px.requires_grad) {
          T* q = px.grad_buffer().plane(i, ch);
          const T a = ps.value.at(i, ch);
          for (std::size_t k = 0; k < hw; ++k) q[k] += a * g[k];
        }
        if (ps.requires_grad) {
          double acc = 0.0;
          for (std::size_t k = 0; k < hw; ++k) acc += static_cast<double>(g[k]) * p[k];
          ps.grad_buffer().at(i, ch) += static_cast<T>(acc);
        }
      }
    }
  });
}

/// Pixelwise softmax cross-entropy; logits (N, K, H, W), target (N, H, W) of class indices.
/// Mean over all pixels of the batch.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const Tensor<int>& target) {
  const int n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (target.rank() != 3 || target.dim(0) != n || target.dim(1) != h || target.dim(2) != w) {
    throw ValidationError("cross_entropy: target " + to_string(target.shape()) + " incompatible with logits " +
                          to_string(logits.shape()));
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const double count = static_cast<double>(n) * hw;
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  double loss = 0.0;
  std::vector<double> z(static_cast<std::size_t>(k));
  for (int i = 0; i < n; ++i) {
    for (std::size_t px = 0; px < hw; ++px) {
      double m = -INFINITY;
      for (int c = 0; c < k; ++c) {
        z[c] = logits.value().plane(i, c)[px];
        m = std::max(m, z[c]);
      }
      double s = 0.0;
      for (int c = 0; c < k; ++c) s += std::exp(z[c] - m);
      const double lse = m + std::log(s);
      const int t = target[static_cast<std::size_t>(i) * hw + px];
      if (t < 0 || t >= k) throw ValidationError("cross_entropy: target class out of range");
      loss += lse - z[t];
      for (int c = 0; c < k; ++c) probs->plane(i, c)[px] = static_cast<T>(std::exp(z[c] - lse));
    }
  }
  Tensor<T> y({1}, static_cast<T>(loss / count));
  return make_op<T>(std::move(y), {logits}, [probs, target, count](Node<T>& self) {
    Tensor<T> g = *probs;
    const int n = g.dim(0), k = g.dim(1);
    const std::size_t hw = g.plane_size();
    const T scale = static_cast<T>(self.grad[0] / count);
    for (int i = 0; i < n; ++i) {
      for (std::size_t px = 0; px < hw; ++px) {
        const int t = target[static_cast<std::size_t>(i) * hw + px];
        g.plane(i, t)[px] -= T{1};
      }
      for (int c = 0; c < k; ++c) {
        T* q = g.plane(i, c);
        for (std::size_t px = 0; px < hw; ++px) q[px] *= scale;
      }
    }
    self.parents[0]->accumulate(g);
  });
}

/// Weighted sum of scalar Vars.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += static_cast<double>(weights[i]) * terms[i].item();
  return make_op<T>(Tensor<T>({1}, static_cast<T>(s)), terms, [weights](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      self.parents[i]->accumulate(Tensor<T>({1}, self.grad[0] * weights[i]));
    }
  });
}

}  // namespace srwseg::ops
