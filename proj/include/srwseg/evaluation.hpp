#pragma once

// Per-image segmentation metrics, macro aggregation, JSON reports and boundary overlays.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "srwseg/network.hpp"
#include "srwseg/synthdata.hpp"

namespace srwseg::eval {

struct ConfusionCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;

  long total() const { return tp + fp + fn + tn; }
};

/// Pixel counts with class 1 (lesion) as positive.
template <class P, class G>
ConfusionCounts confusion(const P* pred, const G* gt, std::size_t n) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = pred[i];
    const auto g = gt[i];
    if ((p != 0 && p != 1) || (g != 0 && g != 1)) {
      throw ValidationError("confusion: masks must be binary (0/1), found pred " + std::to_string(+p) + ", gt " +
                            std::to_string(+g));
    }
    if (p && g) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

template <class P, class G>
ConfusionCounts confusion(const Tensor<P>& pred, const Tensor<G>& gt) {
  if (pred.shape() != gt.shape()) {
    throw ValidationError("confusion: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  }
  return confusion(pred.data(), gt.data(), pred.size());
}

struct Metrics {
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double mean_accuracy = 0.0;
};

inline const std::vector<std::string> kMetricNames{"iou", "precision", "recall", "mean_accuracy"};

inline double metric_value(const Metrics& m, const std::string& name) {
  if (name == "iou") return m.iou;
  if (name == "precision") return m.precision;
  if (name == "recall") return m.recall;
  if (name == "mean_accuracy") return m.mean_accuracy;
  throw ValidationError("unknown metric '" + name + "'");
}

/// Empty ground truth with an empty prediction scores 1 on iou, precision and recall; with a
/// non-empty prediction all three are 0. An empty prediction on a non-empty ground truth has
/// precision 0. Mean accuracy averages the per-class accuracies of the classes present in gt.
inline Metrics metrics_from_counts(const ConfusionCounts& c) {
  Metrics m;
  const bool gt_empty = c.tp + c.fn == 0;
  const bool pred_empty = c.tp + c.fp == 0;
  if (gt_empty) {
    const double v = pred_empty ? 1.0 : 0.0;
    m.iou = m.precision = m.recall = v;
  } else {
    m.iou = static_cast<double>(c.tp) / (c.tp + c.fp + c.fn);
    m.recall = static_cast<double>(c.tp) / (c.tp + c.fn);
    m.precision = pred_empty ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fp);
  }
  double acc = 0.0;
  int classes = 0;
  if (c.tp + c.fn > 0) {
    acc += static_cast<double>(c.tp) / (c.tp + c.fn);
    ++classes;
  }
  if (c.tn + c.fp > 0) {
    acc += static_cast<double>(c.tn) / (c.tn + c.fp);
    ++classes;
  }
  m.mean_accuracy = classes ? acc / classes : 1.0;
  return m;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population standard deviation.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= v.size();
  double var = 0.0;
  for (double x : v) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / v.size());
  return out;
}

struct ImageResult {
  std::string id;
  ConfusionCounts counts;
  Metrics metrics;
};

struct MetricsReport {
  std::string model;
  std::string split;
  std::vector<ImageResult> per_image;
  std::map<std::string, MeanStd> summary;

  int n() const { return static_cast<int>(per_image.size()); }
  const MeanStd& operator[](const std::string& metric) const { return summary.at(metric); }
};

inline void summarize(MetricsReport& report) {
  report.summary.clear();
  for (const auto& name : kMetricNames) {
    std::vector<double> v;
    for (const auto& r : report.per_image) v.push_back(metric_value(r.metrics, name));
    report.summary[name] = mean_std(v);
  }
}

/// Stacks (3, H, W) images into an (N, 3, H, W) batch.
template <class T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw ValidationError("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  Tensor<T> out({static_cast<int>(images.size()), s[0], s[1], s[2]});
  const std::size_t per = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ValidationError("stack_images: images differ in shape");
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = static_cast<T>((*images[i])[k]);
  }
  return out;
}

inline Tensor<int> stack_masks(const std::vector<const synth::Mask*>& masks) {
  if (masks.empty()) throw ValidationError("stack_masks: empty batch");
  const Shape& s = masks.front()->shape();
  Tensor<int> out({static_cast<int>(masks.size()), s[0], s[1]});
  const std::size_t per = masks.front()->size();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i]->shape() != s) throw ValidationError("stack_masks: masks differ in shape");
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = (*masks[i])[k];
  }
  return out;
}

/// Predicted (H, W) masks for every sample, in dataset order.
template <class T>
std::vector<Tensor<int>> predict_all(network::Model<T>& model, const synth::Dataset& data, int batch_size = 16) {
  std::vector<Tensor<int>> out;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(&data.samples[i].image);
    const Tensor<int> pred = network::predict_mask(model, stack_images<T>(imgs));
    const int h = pred.dim(1), w = pred.dim(2);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < end - start; ++i) {
      Tensor<int> m({h, w});
      std::copy(pred.data() + i * hw, pred.data() + (i + 1) * hw, m.data());
      out.push_back(std::move(m));
    }
  }
  return out;
}

template <class T>
MetricsReport evaluate(network::Model<T>& model, const synth::Dataset& data, const std::string& split,
                       const std::string& model_id = "model") {
  if (data.empty()) throw ValidationError("evaluate: empty dataset for split '" + split + "'");
  MetricsReport report;
  report.model = model_id;
  report.split = split;
  const auto preds = predict_all(model, data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ImageResult r;
    r.id = data.samples[i].id;
    r.counts = confusion(preds[i], data.samples[i].mask);
    r.metrics = metrics_from_counts(r.counts);
    report.per_image.push_back(std::move(r));
  }
  summarize(report);
  return report;
}

inline nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["model"] = report.model;
  j["split"] = report.split;
  j["n"] = report.n();
  for (const auto& [name, ms] : report.summary) j["metrics"][name] = {{"mean", ms.mean}, {"std", ms.std}};
  j["per_image"] = nlohmann::json::array();
  for (const auto& r : report.per_image) {
    nlohmann::json e{{"id", r.id}, {"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}};
    for (const auto& name : kMetricNames) e[name] = metric_value(r.metrics, name);
    j["per_image"].push_back(std::move(e));
  }
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport report;
  try {
    report.model = j.at("model").get<std::string>();
    report.split = j.at("split").get<std::string>();
    for (const auto& e : j.at("per_image")) {
      ImageResult r;
      r.id = e.at("id").get<std::string>();
      r.counts = {e.at("tp").get<long>(), e.at("fp").get<long>(), e.at("fn").get<long>(), e.at("tn").get<long>()};
      r.metrics = {e.at("iou").get<double>(), e.at("precision").get<double>(), e.at("recall").get<double>(),
                   e.at("mean_accuracy").get<double>()};
      report.per_image.push_back(std::move(r));
    }
    for (const auto& [name, v] : j.at("metrics").items()) {
      report.summary[name] = {v.at("mean").get<double>(), v.at("std").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report: malformed JSON (") + e.what() + ")");
  }
  return report;
}

inline void export_report(const MetricsReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write report to " + path.string());
  f << report_to_json(report).dump(2) << "\n";
  if (!f) throw IoError("write failed for " + path.string());
}

inline MetricsReport load_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read report " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("report " + path.string() + " is not valid JSON: " + e.what());
  }
  return report_from_json(j);
}

/// Foreground pixels with a background (or out-of-frame) 4-neighbour.
template <class M>
std::vector<std::uint8_t> boundary(const M* mask, int h, int w) {
  std::vector<std::uint8_t> b(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || !mask[(y - 1) * w + x] ||
                        !mask[(y + 1) * w + x] || !mask[y * w + x - 1] || !mask[y * w + x + 1];
      b[y * w + x] = edge;
    }
  }
  return b;
}

/// Writes `<dir>/<id>.png` for the first min(limit, |data|) samples: the input with the ground
/// truth boundary in red and the predicted boundary in green (green wins where they meet).
template <class T>
int export_overlays(network::Model<T>& model, const synth::Dataset& data, const std::filesystem::path& dir, int limit) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create overlay directory " + dir.string());
  const std::size_t count = std::min<std::size_t>(data.size(), static_cast<std::size_t>(std::max(0, limit)));
  synth::Dataset subset;
  subset.samples.assign(data.samples.begin(), data.samples.begin() + count);
  const auto preds = predict_all(model, subset);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& s = subset.samples[i];
    io::Image8 img = synth::to_image8(s.image);
    const int h = s.mask.dim(0), w = s.mask.dim(1);
    const auto gt_edge = boundary(s.mask.data(), h, w);
    const auto pred_edge = boundary(preds[i].data(), h, w);
    for (std::size_t p = 0; p < gt_edge.size(); ++p) {
      std::uint8_t* px = &img.pixels[p * 3];
      if (gt_edge[p]) px[0] = 255, px[1] = 0, px[2] = 0;
      if (pred_edge[p]) px[0] = 0, px[1] = 255, px[2] = 0;
    }
    io::write_png(dir / (s.id + ".png"), img);
  }
  return static_cast<int>(count);
}

}  // namespace srwseg::eval
