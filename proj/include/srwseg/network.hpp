#pragma once

// Compact DeepLabv3+-style binary segmenter with SRW insertion points.
//
//   stem 3x3 -> stage1 (/2) -> stage2 (/4) -> stage3 (/8) -> stage4 (/8, dilation 2)
//   each stage: two basic residual blocks, optionally followed by an SNR block whose
//   enhanced output continues downstream and whose covariance feeds the ISW loss.
//   ASPP on stage 4, decoder fuses the upsampled context with projected stage-1 features.

#include <algorithm>
#include <array>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "srwseg/isw.hpp"
#include "srwseg/snr.hpp"

namespace srwseg::network {

inline constexpr int kNumStages = 4;

struct NetworkConfig {
  std::array<int, kNumStages> stage_channels{32, 64, 128, 256};
  std::vector<int> srw_stages{1, 2, 3};
  std::vector<int> aspp_dilations{1, 6, 12};
  int num_classes = 2;
  int input_h = 64;
  int input_w = 64;
  int aspp_channels = 64;
  int low_level_channels = 16;
  int decoder_channels = 48;
  int reduction = snr::kDefaultReduction;
  bool attention_batch_shared = false;

  bool has_srw(int stage) const {
    return std::find(srw_stages.begin(), srw_stages.end(), stage) != srw_stages.end();
  }
  int deepest_srw() const { return srw_stages.empty() ? 0 : *std::max_element(srw_stages.begin(), srw_stages.end()); }

  void validate() const {
    for (int c : stage_channels) {
      if (c < 1) throw ConfigError("stage_channels must be positive");
    }
    std::set<int> seen;
    for (int s : srw_stages) {
      if (s < 1 || s > kNumStages) throw ConfigError("srw_stages must be a subset of {1,2,3,4}, got " + std::to_string(s));
      if (!seen.insert(s).second) throw ConfigError("srw_stages lists stage " + std::to_string(s) + " twice");
    }
    if (aspp_dilations.empty()) throw ConfigError("aspp_dilations must not be empty");
    for (int d : aspp_dilations) {
      if (d < 1) throw ConfigError("aspp_dilations must be positive");
    }
    if (num_classes != 2) throw ConfigError("num_classes must be 2 (binary segmentation)");
    if (input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0) {
      throw ConfigError("input size must be a positive multiple of 16, got " + std::to_string(input_h) + "x" +
                        std::to_string(input_w));
    }
    if (aspp_channels < 1 || low_level_channels < 1 || decoder_channels < 1 || reduction < 1) {
      throw ConfigError("head widths and reduction must be positive");
    }
  }
};

/// Spatial downsampling factor at the output of stage s (1-based).
inline int stage_stride(int stage) { return 1 << std::min(stage, 3); }

enum class Mode { Train, Eval };

/// How a batch-norm layer behaves on a given forward pass.
enum class NormMode { Train, TrainFrozen, Eval };

template <class T>
struct Conv {
  Var<T> weight;
  Var<T> bias;  // undefined when the conv has no bias
  kernels::ConvGeometry geom;

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias.defined() ? &bias : nullptr, geom); }
};

template <class T>
struct BatchNorm {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  Var<T> forward(const Var<T>& x, NormMode mode) {
    if (mode == NormMode::Eval) return ops::batchnorm_eval(x, gamma, beta, running_mean, running_var, eps);
    kernels::BatchStats<T> stats;
    Var<T> y = ops::batchnorm_train(x, gamma, beta, eps, stats);
    if (mode == NormMode::Train) {
      const double count = static_cast<double>(x.dim(0)) * x.value().plane_size();
      const double unbias = count > 1 ? count / (count - 1) : 1.0;
      for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        running_mean[c] = (T{1} - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (T{1} - momentum) * running_var[c] + momentum * static_cast<T>(stats.var[c] * unbias);
      }
    }
    return y;
  }
};

template <class T>
struct ResBlock {
  Conv<T> conv1;
  BatchNorm<T> bn1;
  Conv<T> conv2;
  BatchNorm<T> bn2;
  std::optional<Conv<T>> down;
  std::optional<BatchNorm<T>> down_bn;

  Var<T> forward(const Var<T>& x, NormMode mode) {
    Var<T> h = ops::relu(bn1.forward(conv1(x), mode));
    h = bn2.forward(conv2(h), mode);
    Var<T> shortcut = down ? down_bn->forward((*down)(x), mode) : x;
    return ops::relu(ops::add(h, shortcut));
  }
};

template <class T>
struct ForwardArtifacts {
  Var<T> logits;
  std::vector<int> stages;                      // configured SRW stages, ascending
  std::vector<snr::SnrVars<T>> per_stage_snr;   // raw path
  std::vector<snr::SnrVars<T>> per_stage_snr_aug;
  std::vector<Var<T>> per_stage_theta_raw;
  std::vector<Var<T>> per_stage_theta_aug;
};

template <class T>
class Model {
 public:
  Model(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    std::sort(config_.srw_stages.begin(), config_.srw_stages.end());
    Rng rng(seed);
    build(rng);
  }

  // Parameters are shared handles; a copy would alias the weights.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const NetworkConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  /// Visits every trainable parameter in a fixed order with a stable name.
  void for_each_parameter(const std::function<void(const std::string&, Var<T>&)>& fn) {
    visit(fn, [](const std::string&, Tensor<T>&) {});
  }
  /// Visits every non-trainable buffer (batch-norm running statistics).
  void for_each_buffer(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    visit([](const std::string&, Var<T>&) {}, fn);
  }

  std::vector<Var<T>> parameters() {
    std::vector<Var<T>> out;
    for_each_parameter([&](const std::string&, Var<T>& v) { out.push_back(v); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, Var<T>& v) { n += v.value().size(); });
    return n;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Var<T>& v) { v.zero_grad(); });
  }

  /// Train mode runs both paths with shared weights and captures covariances of the enhanced
  /// features; eval mode runs the raw path only.
  ForwardArtifacts<T> forward(const Tensor<T>& x, const Tensor<T>* x_aug, Mode mode, bool snr_on_aug = false) {
    check_input(x, "x");
    const bool srw = !config_.srw_stages.empty();
    if (mode == Mode::Train && srw && x_aug == nullptr) {
      throw ValidationError("forward: train mode with SRW stages requires the transformed batch x_aug");
    }
    if (mode == Mode::Eval && x_aug != nullptr) {
      throw ValidationError("forward: eval mode takes a single input path");
    }
    if (x_aug) {
      if (x_aug->shape() != x.shape()) throw ValidationError("forward: x_aug shape differs from x");
    }

    ForwardArtifacts<T> art;
    art.stages = config_.srw_stages;
    const NormMode nm = mode == Mode::Train ? NormMode::Train : NormMode::Eval;
    const bool capture = mode == Mode::Train && srw;

    Var<T> low_level;
    Var<T> h = encode(Var<T>(x), nm, kNumStages, capture, art.per_stage_snr, art.per_stage_theta_raw, &low_level);
    if (capture && x_aug) {
      std::vector<snr::SnrVars<T>> aug_snr;
      encode(Var<T>(*x_aug), NormMode::TrainFrozen, config_.deepest_srw(), true, aug_snr, art.per_stage_theta_aug,
             nullptr);
      if (snr_on_aug) art.per_stage_snr_aug = std::move(aug_snr);
    }

    Var<T> context = aspp(h, nm);
    context = ops::resize_bilinear(context, low_level.dim(2), low_level.dim(3));
    Var<T> skip = ops::relu(low_bn_.forward(low_proj_(low_level), nm));
    Var<T> d = ops::concat_channels<T>({context, skip});
    d = ops::relu(dec_bn1_.forward(dec_conv1_(d), nm));
    d = ops::relu(dec_bn2_.forward(dec_conv2_(d), nm));
    art.logits = ops::resize_bilinear(classifier_(d), x.dim(2), x.dim(3));
    return art;
  }

  /// Eval-mode forward without graph recording.
  Tensor<T> predict_logits(const Tensor<T>& x) {
    NoGradGuard guard;
    return forward(x, nullptr, Mode::Eval).logits.value();
  }

 private:
  void check_input(const Tensor<T>& x, const char* name) const {
    require_rank(x, 4, "forward");
    if (x.dim(1) != 3) throw ValidationError(std::string("forward: ") + name + " must have 3 channels");
    if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0 || x.dim(2) < 16 || x.dim(3) < 16) {
      throw ValidationError(std::string("forward: ") + name + " spatial size must be a multiple of 16, got " +
                            to_string(x.shape()));
    }
  }

  Var<T> encode(Var<T> h, NormMode nm, int last_stage, bool capture, std::vector<snr::SnrVars<T>>& snr_out,
                std::vector<Var<T>>& theta_out, Var<T>* low_level) {
    h = ops::relu(stem_bn_.forward(stem_(h), nm));
    for (int s = 1; s <= last_stage; ++s) {
      auto& stage = stages_[static_cast<std::size_t>(s - 1)];
      h = stage[0].forward(h, nm);
      h = stage[1].forward(h, nm);
      if (config_.has_srw(s)) {
        auto out = snr::snr_forward(h, snr_[static_cast<std::size_t>(s - 1)]);
        h = out.enhanced;
        if (capture) {
          theta_out.push_back(isw::covariance(out.enhanced, true));
          snr_out.push_back(std::move(out));
        }
      }
      if (s == 1 && low_level) *low_level = h;
    }
    return h;
  }

  Var<T> aspp(const Var<T>& h, NormMode nm) {
    std::vector<Var<T>> branches;
    for (std::size_t i = 0; i < aspp_convs_.size(); ++i) {
      branches.push_back(ops::relu(aspp_bns_[i].forward(aspp_convs_[i](h), nm)));
    }
    Var<T> pooled = ops::relu(ops::linear(ops::global_avg_pool(h), pool_w_, pool_b_));
    branches.push_back(ops::broadcast_spatial(pooled, h.dim(2), h.dim(3)));
    return ops::relu(aspp_proj_bn_.forward(aspp_proj_(ops::concat_channels(branches)), nm));
  }

  Conv<T> make_conv(Rng& rng, int cin, int cout, int k, int stride, int dilation, bool bias) {
    Conv<T> c;
    c.geom = {k, stride, k == 1 ? 0 : dilation * (k / 2), dilation};
    Tensor<T> w({cout, cin, k, k});
    const double std = std::sqrt(2.0 / (cin * k * k));
    for (auto& v : w.values()) v = static_cast<T>(std * rng.normal());
    c.weight = Var<T>(std::move(w), true);
    if (bias) c.bias = Var<T>(Tensor<T>({cout}), true);
    return c;
  }

  static BatchNorm<T> make_bn(int channels) {
    BatchNorm<T> bn;
    bn.gamma = Var<T>(Tensor<T>({channels}, T{1}), true);
    bn.beta = Var<T>(Tensor<T>({channels}), true);
    bn.running_mean = Tensor<T>({channels});
    bn.running_var = Tensor<T>({channels}, T{1});
    return bn;
  }

  ResBlock<T> make_block(Rng& rng, int cin, int cout, int stride, int dilation) {
    ResBlock<T> b;
    b.conv1 = make_conv(rng, cin, cout, 3, stride, dilation, false);
    b.bn1 = make_bn(cout);
    b.conv2 = make_conv(rng, cout, cout, 3, 1, dilation, false);
    b.bn2 = make_bn(cout);
    if (stride != 1 || cin != cout) {
      b.down = make_conv(rng, cin, cout, 1, stride, 1, false);
      b.down_bn = make_bn(cout);
    }
    return b;
  }

  void build(Rng& rng) {
    const auto& ch = config_.stage_channels;
    stem_ = make_conv(rng, 3, ch[0], 3, 1, 1, false);
    stem_bn_ = make_bn(ch[0]);
    constexpr std::array<int, kNumStages> strides{2, 2, 2, 1};
    constexpr std::array<int, kNumStages> dilations{1, 1, 1, 2};
    int cin = ch[0];
    for (int s = 0; s < kNumStages; ++s) {
      stages_[s][0] = make_block(rng, cin, ch[s], strides[s], dilations[s]);
      stages_[s][1] = make_block(rng, ch[s], ch[s], 1, dilations[s]);
      cin = ch[s];
      if (config_.has_srw(s + 1)) {
        // own stream, so the backbone draws match a model without this stage
        Rng snr_rng(derive_seed(seed_, 0x534e52, static_cast<std::uint64_t>(s)));
        snr_[s] = snr::make_params<T>(ch[s], config_.reduction, snr_rng);
        snr_[s].batch_shared = config_.attention_batch_shared;
      }
    }
    const int a = config_.aspp_channels;
    for (int d : config_.aspp_dilations) {
      aspp_convs_.push_back(d == 1 ? make_conv(rng, ch[3], a, 1, 1, 1, false) : make_conv(rng, ch[3], a, 3, 1, d, false));
      aspp_bns_.push_back(make_bn(a));
    }
    {
      Tensor<T> w({ch[3], a});
      const double std = std::sqrt(2.0 / ch[3]);
      for (auto& v : w.values()) v = static_cast<T>(std * rng.normal());
      pool_w_ = Var<T>(std::move(w), true);
      pool_b_ = Var<T>(Tensor<T>({a}), true);
    }
    const int branches = static_cast<int>(config_.aspp_dilations.size()) + 1;
    aspp_proj_ = make_conv(rng, a * branches, a, 1, 1, 1, false);
    aspp_proj_bn_ = make_bn(a);
    low_proj_ = make_conv(rng, ch[0], config_.low_level_channels, 1, 1, 1, false);
    low_bn_ = make_bn(config_.low_level_channels);
    dec_conv1_ = make_conv(rng, a + config_.low_level_channels, config_.decoder_channels, 3, 1, 1, false);
    dec_bn1_ = make_bn(config_.decoder_channels);
    dec_conv2_ = make_conv(rng, config_.decoder_channels, config_.decoder_channels, 3, 1, 1, false);
    dec_bn2_ = make_bn(config_.decoder_channels);
    classifier_ = make_conv(rng, config_.decoder_channels, config_.num_classes, 1, 1, 1, true);
  }

  template <class PF, class BF>
  void visit(PF&& param, BF&& buffer) {
    auto conv = [&](const std::string& name, Conv<T>& c) {
      param(name + ".weight", c.weight);
      if (c.bias.defined()) param(name + ".bias", c.bias);
    };
    auto bn = [&](const std::string& name, BatchNorm<T>& b) {
      param(name + ".gamma", b.gamma);
      param(name + ".beta", b.beta);
      buffer(name + ".running_mean", b.running_mean);
      buffer(name + ".running_var", b.running_var);
    };
    conv("stem", stem_);
    bn("stem_bn", stem_bn_);
    for (int s = 0; s < kNumStages; ++s) {
      for (int b = 0; b < 2; ++b) {
        const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        auto& blk = stages_[s][b];
        conv(p + ".conv1", blk.conv1);
        bn(p + ".bn1", blk.bn1);
        conv(p + ".conv2", blk.conv2);
        bn(p + ".bn2", blk.bn2);
        if (blk.down) {
          conv(p + ".down", *blk.down);
          bn(p + ".down_bn", *blk.down_bn);
        }
      }
      if (config_.has_srw(s + 1)) {
        const std::string p = "stage" + std::to_string(s + 1) + ".snr";
        param(p + ".fc1_w", snr_[s].fc1_w);
        param(p + ".fc1_b", snr_[s].fc1_b);
        param(p + ".fc2_w", snr_[s].fc2_w);
        param(p + ".fc2_b", snr_[s].fc2_b);
      }
    }
    for (std::size_t i = 0; i < aspp_convs_.size(); ++i) {
      conv("aspp.branch" + std::to_string(i), aspp_convs_[i]);
      bn("aspp.branch" + std::to_string(i) + "_bn", aspp_bns_[i]);
    }
    param("aspp.pool.weight", pool_w_);
    param("aspp.pool.bias", pool_b_);
    conv("aspp.proj", aspp_proj_);
    bn("aspp.proj_bn", aspp_proj_bn_);
    conv("decoder.low_proj", low_proj_);
    bn("decoder.low_bn", low_bn_);
    conv("decoder.conv1", dec_conv1_);
    bn("decoder.bn1", dec_bn1_);
    conv("decoder.conv2", dec_conv2_);
    bn("decoder.bn2", dec_bn2_);
    conv("classifier", classifier_);
  }

  NetworkConfig config_;
  std::uint64_t seed_;
  Conv<T> stem_;
  BatchNorm<T> stem_bn_;
  std::array<std::array<ResBlock<T>, 2>, kNumStages> stages_;
  std::array<snr::SnrParams<T>, kNumStages> snr_;
  std::vector<Conv<T>> aspp_convs_;
  std::vector<BatchNorm<T>> aspp_bns_;
  Var<T> pool_w_;
  Var<T> pool_b_;
  Conv<T> aspp_proj_;
  BatchNorm<T> aspp_proj_bn_;
  Conv<T> low_proj_;
  BatchNorm<T> low_bn_;
  Conv<T> dec_conv1_;
  BatchNorm<T> dec_bn1_;
  Conv<T> dec_conv2_;
  BatchNorm<T> dec_bn2_;
  Conv<T> classifier_;
};

/// Deterministic construction; identical (config, seed) give bit-identical parameters.
template <class T>
Model<T> build_model(const NetworkConfig& config, std::uint64_t seed) {
  return Model<T>(config, seed);
}

/// Argmax over the class axis; ties resolve to the lowest class index.
template <class T>
Tensor<int> argmax_mask(const Tensor<T>& logits) {
  require_rank(logits, 4, "argmax_mask");
  const int n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t hw = logits.plane_size();
  Tensor<int> out({n, h, w});
  for (int i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < hw; ++p) {
      int best = 0;
      for (int c = 1; c < k; ++c) {
        if (logits.plane(i, c)[p] > logits.plane(i, best)[p]) best = c;
      }
      out[static_cast<std::size_t>(i) * hw + p] = best;
    }
  }
  return out;
}

template <class T>
Tensor<int> predict_mask(Model<T>& model, const Tensor<T>& x) {
  return argmax_mask(model.predict_logits(x));
}

}  // namespace srwseg::network
