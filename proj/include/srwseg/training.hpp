#pragma once

// Combined objective, polynomial SGD and the training loop.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "srwseg/checkpoint.hpp"
#include "srwseg/config.hpp"
#include "srwseg/evaluation.hpp"
#include "srwseg/isw.hpp"
#include "srwseg/network.hpp"
#include "srwseg/synthdata.hpp"

namespace srwseg::training {

enum class Phase { Warmup, Full };

template <class T>
struct LossBundle {
  double task = 0.0;
  std::vector<double> dc_per_layer;
  std::vector<double> isw_per_layer;
  double total = 0.0;
  Var<T> graph;  // differentiable total

  double dc_sum() const { return std::accumulate(dc_per_layer.begin(), dc_per_layer.end(), 0.0); }
  double isw_sum() const { return std::accumulate(isw_per_layer.begin(), isw_per_layer.end(), 0.0); }
};

inline void require_binary_target(const Tensor<int>& target) {
  for (int v : target.values()) {
    if (v != 0 && v != 1) throw ValidationError("total_loss: target mask must be binary, found " + std::to_string(v));
  }
}

/// total = task + sum over SRW stages of (lambda_isw * isw + lambda_dc * dc). The whitening
/// term of a stage is the mean over the raw and transformed paths and is absent in warm-up.
template <class T>
LossBundle<T> total_loss(const network::ForwardArtifacts<T>& art, const Tensor<int>& target,
                         const std::vector<isw::WhiteningMask>& masks, const TrainingConfig& cfg, Phase phase) {
  require_binary_target(target);
  const std::size_t layers = art.stages.size();
  if (phase == Phase::Full && !masks.empty() && masks.size() != layers) {
    throw ValidationError("total_loss: " + std::to_string(masks.size()) + " masks for " + std::to_string(layers) +
                          " SRW stages");
  }
  LossBundle<T> b;
  Var<T> task = ops::cross_entropy(art.logits, target);
  b.task = static_cast<double>(task.item());
  std::vector<Var<T>> terms{task};
  std::vector<T> weights{T{1}};

  for (std::size_t l = 0; l < layers; ++l) {
    const auto& o = art.per_stage_snr.at(l);
    Var<T> dc = snr::dual_causality_loss(o.enhanced, o.normalized, o.corrupted);
    b.dc_per_layer.push_back(static_cast<double>(dc.item()));
    terms.push_back(dc);
    weights.push_back(static_cast<T>(cfg.lambda_dc));

    double isw_value = 0.0;
    if (phase == Phase::Full && !masks.empty() && masks[l].selected_count > 0) {
      Var<T> raw = isw::isw_loss(art.per_stage_theta_raw.at(l), masks[l]);
      Var<T> aug = isw::isw_loss(art.per_stage_theta_aug.at(l), masks[l]);
      isw_value = 0.5 * (static_cast<double>(raw.item()) + static_cast<double>(aug.item()));
      terms.push_back(raw);
      terms.push_back(aug);
      weights.push_back(static_cast<T>(0.5 * cfg.lambda_isw));
      weights.push_back(static_cast<T>(0.5 * cfg.lambda_isw));
    }
    b.isw_per_layer.push_back(isw_value);
  }

  b.total = b.task;
  for (std::size_t l = 0; l < layers; ++l) b.total += cfg.lambda_isw * b.isw_per_layer[l] + cfg.lambda_dc * b.dc_per_layer[l];
  b.graph = ops::weighted_sum(terms, weights);
  return b;
}

/// lr0 * (1 - step / max_steps)^power, 0 from max_steps on.
inline double poly_lr(double lr0, long step, long max_steps, double power) {
  if (max_steps <= 0) throw ValidationError("poly_lr: max_steps must be positive");
  if (step < 0) throw ValidationError("poly_lr: negative step");
  if (step >= max_steps) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(step) / max_steps, power);
}

/// SGD with heavy-ball momentum: v = mu v + (g + wd p); p -= lr v.
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Var<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.value().shape());
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.grad().empty()) continue;
      Tensor<T>& w = p.mutable_value();
      const Tensor<T>& g = p.grad();
      Tensor<T>& v = velocity_[i];
      const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), rate = static_cast<T>(lr);
      for (std::size_t k = 0; k < w.size(); ++k) {
        const T d = g[k] + wd * w[k];
        v[k] = started_ ? mu * v[k] + d : d;
        w[k] -= rate * v[k];
      }
    }
    started_ = true;
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
      for (T g : p.grad().values()) s += static_cast<double>(g) * g;
    }
    return std::sqrt(s);
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_;
  double weight_decay_;
  bool started_ = false;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double dc_loss = 0.0;
  double isw_loss = 0.0;
  double total_loss = 0.0;
  double val_iou = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"lr", lr}, {"task_loss", task_loss}, {"dc_loss", dc_loss},
                     {"isw_loss", isw_loss}};
    j["val_iou"] = std::isfinite(val_iou) ? nlohmann::json(val_iou) : nlohmann::json(nullptr);
    return j;
  }
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::string model_id = "model";
  std::function<void(const EpochLog&)> on_epoch;
};

template <class T>
struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_iou = -1.0;
  ckpt::ModelState<T> best_state;
  network::Model<T> model;  // weights after the final epoch
};

/// Per-stage whitening statistics as stored in checkpoint metadata.
inline nlohmann::json isw_state_to_json(const std::vector<int>& stages, const std::vector<isw::VarianceState>& state) {
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t l = 0; l < state.size(); ++l) {
    const auto& v = state[l];
    j.push_back({{"stage", stages.at(l)},
                 {"momentum", v.momentum},
                 {"warm_samples", v.warm_samples},
                 {"required_warm", v.required_warm},
                 {"shape", v.ema.shape()},
                 {"ema", std::vector<double>(v.ema.values().begin(), v.ema.values().end())}});
  }
  return j;
}

inline std::vector<isw::VarianceState> isw_state_from_json(const nlohmann::json& j) {
  std::vector<isw::VarianceState> out;
  try {
    for (const auto& e : j) {
      isw::VarianceState v;
      v.momentum = e.at("momentum").get<double>();
      v.warm_samples = e.at("warm_samples").get<long>();
      v.required_warm = e.at("required_warm").get<long>();
      const auto shape = e.at("shape").get<Shape>();
      if (!shape.empty()) v.ema = Tensor<double>(shape, e.at("ema").get<std::vector<double>>());
      out.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("isw_state: malformed metadata (") + e.what() + ")");
  }
  return out;
}

namespace detail {

inline std::vector<const synth::SamplePair*> take(const synth::Dataset& d, int limit) {
  std::vector<const synth::SamplePair*> out;
  for (const auto& s : d.samples) {
    if (limit > 0 && static_cast<int>(out.size()) == limit) break;
    out.push_back(&s);
  }
  return out;
}

template <class T>
std::string divergence_dump(long step, int epoch, const LossBundle<T>& b, network::Model<T>& model) {
  nlohmann::json j{{"step", step}, {"epoch", epoch}, {"task", b.task}, {"total", b.total}};
  j["dc_per_layer"] = b.dc_per_layer;
  j["isw_per_layer"] = b.isw_per_layer;
  model.for_each_parameter([&](const std::string& name, Var<T>& v) {
    double s = 0.0;
    for (T g : v.grad().values()) s += static_cast<double>(g) * g;
    j["grad_norms"][name] = std::sqrt(s);
  });
  return j.dump(2);
}

}  // namespace detail

/// Trains from scratch on `train_set`, selecting on mean IoU over `val_set`. Fully determined
/// by the configuration (including its seed) and the data.
template <class T = float>
TrainResult<T> train(const RunConfig& cfg, const synth::Dataset& train_set, const synth::Dataset& val_set,
                     const TrainOptions& options = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  const TrainingConfig& tc = cfg.train;
  const auto samples = detail::take(train_set, tc.train_limit);
  if (samples.empty()) throw ValidationError("train: the training split is empty");
  synth::Dataset val;
  for (const auto* s : detail::take(val_set, tc.val_limit)) val.samples.push_back(*s);
  for (const auto* s : samples) {
    if (s->image.dim(1) != cfg.net.input_h || s->image.dim(2) != cfg.net.input_w) {
      throw ValidationError("train: image " + s->id + " is " + std::to_string(s->image.dim(1)) + "x" +
                            std::to_string(s->image.dim(2)) + ", network expects " + std::to_string(cfg.net.input_h) +
                            "x" + std::to_string(cfg.net.input_w));
    }
  }

  TrainResult<T> result{{}, 0, -1.0, {}, network::Model<T>(cfg.net, tc.seed)};
  auto& model = result.model;
  Sgd<T> opt(model.parameters(), tc.momentum, tc.weight_decay);
  const bool srw = !cfg.net.srw_stages.empty();
  std::vector<isw::VarianceState> variance(cfg.net.srw_stages.size());
  for (auto& v : variance) v.momentum = tc.ema_momentum;

  const int n = static_cast<int>(samples.size());
  const int batch = std::min(tc.batch_size, n);
  const int steps_per_epoch = n / batch;
  const long max_steps = static_cast<long>(steps_per_epoch) * tc.epochs;

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    log_file.open(options.out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + (options.out_dir / "train_log.jsonl").string());
    std::ofstream(options.out_dir / "config.txt") << to_config_text(cfg);
  }

  synth::AugmentPolicy policy = tc.augment ? synth::AugmentPolicy{} : synth::AugmentPolicy::identity();
  const synth::StylePolicy style{tc.style_jitter, tc.style_sigma_min, tc.style_sigma_max};
  long step = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const Phase phase = epoch <= tc.warmup_epochs ? Phase::Warmup : Phase::Full;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(tc.seed, 101, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    EpochLog entry;
    entry.epoch = epoch;
    for (int b = 0; b < steps_per_epoch; ++b) {
      std::vector<synth::Image> imgs, augs;
      std::vector<synth::Mask> masks;
      for (int k = 0; k < batch; ++k) {
        const int idx = order[static_cast<std::size_t>(b * batch + k)];
        const auto& s = *samples[static_cast<std::size_t>(idx)];
        auto [img, m] = synth::augment(s.image, s.mask,
                                       derive_seed(tc.seed, 102, static_cast<std::uint64_t>(epoch), idx), policy);
        if (srw) augs.push_back(synth::style_transform(img, derive_seed(tc.seed, 103, static_cast<std::uint64_t>(epoch), idx), style));
        imgs.push_back(std::move(img));
        masks.push_back(std::move(m));
      }
      std::vector<const Tensor<float>*> ip, ap;
      std::vector<const synth::Mask*> mp;
      for (auto& i : imgs) ip.push_back(&i);
      for (auto& a : augs) ap.push_back(&a);
      for (auto& m : masks) mp.push_back(&m);
      const Tensor<T> x = eval::stack_images<T>(ip);
      const Tensor<int> y = eval::stack_masks(mp);
      Tensor<T> xa;
      if (srw) xa = eval::stack_images<T>(ap);

      auto art = model.forward(x, srw ? &xa : nullptr, network::Mode::Train);
      std::vector<isw::WhiteningMask> wmasks;
      for (std::size_t l = 0; l < art.stages.size(); ++l) {
        isw::update_variance_ema(variance[l], isw::pair_variance(art.per_stage_theta_raw[l].value(),
                                                                 art.per_stage_theta_aug[l].value()));
        if (phase == Phase::Full) wmasks.push_back(isw::cluster_variance(variance[l]));
      }
      auto bundle = total_loss(art, y, wmasks, tc, phase);

      opt.zero_grad();
      backward(bundle.graph);
      if (!std::isfinite(bundle.total) || !std::isfinite(static_cast<double>(bundle.graph.item())) ||
          !std::isfinite(opt.grad_norm())) {
        const std::string dump = detail::divergence_dump(step, epoch, bundle, model);
        if (!options.out_dir.empty()) std::ofstream(options.out_dir / "divergence.json") << dump << "\n";
        throw DivergenceError("training diverged (non-finite loss or gradient) at step " + std::to_string(step) +
                              ":\n" + dump);
      }
      const double lr = poly_lr(tc.lr0, step, max_steps, tc.poly_power);
      opt.step(lr);
      ++step;

      entry.lr = lr;
      entry.task_loss += bundle.task / steps_per_epoch;
      entry.dc_loss += bundle.dc_sum() / steps_per_epoch;
      entry.isw_loss += bundle.isw_sum() / steps_per_epoch;
      entry.total_loss += bundle.total / steps_per_epoch;
    }

    if (!val.empty()) entry.val_iou = eval::evaluate(model, val, "val")["iou"].mean;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (log_file) log_file << entry.to_json().dump() << "\n" << std::flush;

    const double score = std::isfinite(entry.val_iou) ? entry.val_iou : -entry.total_loss;
    const bool improved = result.best_epoch == 0 || score > result.best_val_iou;
    if (improved) {
      result.best_epoch = epoch;
      result.best_val_iou = score;
      result.best_state = ckpt::capture_state(model);
    }
    if (!options.out_dir.empty()) {
      nlohmann::json meta{{"epoch", epoch}, {"model_id", options.model_id}, {"seed", tc.seed},
                          {"config", to_config_text(cfg)}};
      meta["isw_state"] = isw_state_to_json(model.config().srw_stages, variance);
      meta["val_iou"] = std::isfinite(entry.val_iou) ? nlohmann::json(entry.val_iou) : nlohmann::json(nullptr);
      if (improved) ckpt::save_checkpoint(options.out_dir / "best.ckpt", model, meta);
      if (epoch % tc.checkpoint_every == 0 || epoch == tc.epochs) {
        ckpt::save_checkpoint(options.out_dir / "last.ckpt", model, meta);
      }
    }
    if (options.on_epoch) options.on_epoch(entry);
  }
  return result;
}

/// Copy of the final model carrying the best-validation weights.
template <class T>
network::Model<T> best_model(const TrainResult<T>& r, const RunConfig& cfg) {
  network::Model<T> m(cfg.net, cfg.train.seed);
  ckpt::restore_state(m, r.best_state);
  return m;
}

}  // namespace srwseg::training
