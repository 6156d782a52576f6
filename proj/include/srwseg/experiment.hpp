#pragma once

// Train-and-evaluate runs on a corpus, the baseline/SRW pairing and the SRW-stage ablation.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "srwseg/training.hpp"

namespace srwseg::experiment {

struct Splits {
  synth::Dataset train;
  synth::Dataset val;
  synth::Dataset test_source;
  synth::Dataset test_target;
};

/// Partitions samples by the manifest's split assignment.
inline Splits split_corpus(const synth::Dataset& all) {
  if (!all.manifest) throw ValidationError("split_corpus: dataset has no manifest");
  Splits s;
  for (const auto& sample : all.samples) {
    const std::string split = all.manifest->split_of(sample.id);
    if (split == "train") {
      s.train.samples.push_back(sample);
    } else if (split == "val") {
      s.val.samples.push_back(sample);
    } else if (split == "test-source") {
      s.test_source.samples.push_back(sample);
    } else if (split == "test-target") {
      s.test_target.samples.push_back(sample);
    }
  }
  return s;
}

inline Splits split_corpus(const synth::Corpus& corpus) {
  synth::Dataset all{corpus.manifest, corpus.samples};
  return split_corpus(all);
}

/// Plain network: no SRW stages and no auxiliary losses.
inline training::RunConfig baseline_of(training::RunConfig cfg) {
  cfg.net.srw_stages.clear();
  cfg.train.lambda_isw = 0.0;
  cfg.train.lambda_dc = 0.0;
  return cfg;
}

struct RunOutcome {
  std::string label;
  training::RunConfig config;
  std::vector<training::EpochLog> log;
  int best_epoch = 0;
  double best_val_iou = 0.0;
  eval::MetricsReport source;
  eval::MetricsReport target;
};

/// Trains, then scores the best-validation weights on both test splits. With a non-empty
/// `out_dir` the run's log, checkpoints and reports are written there.
inline RunOutcome run(const training::RunConfig& cfg, const Splits& data, const std::string& label,
                      const std::filesystem::path& out_dir = {},
                      std::function<void(const training::EpochLog&)> on_epoch = {}) {
  auto result = training::train<float>(cfg, data.train, data.val, {out_dir, label, std::move(on_epoch)});
  auto best = training::best_model(result, cfg);
  RunOutcome o;
  o.label = label;
  o.config = cfg;
  o.log = result.log;
  o.best_epoch = result.best_epoch;
  o.best_val_iou = result.best_val_iou;
  o.source = eval::evaluate(best, data.test_source, "test-source", label);
  o.target = eval::evaluate(best, data.test_target, "test-target", label);
  if (!out_dir.empty()) {
    eval::export_report(o.source, out_dir / "report_test-source.json");
    eval::export_report(o.target, out_dir / "report_test-target.json");
  }
  return o;
}

/// SRW stage sets of the ablation, shallowest first; the empty set is the plain baseline.
inline std::vector<std::vector<int>> ablation_stage_sets() { return {{}, {1}, {1, 2}, {1, 2, 3}}; }

inline std::string stages_label(const std::vector<int>& stages) {
  if (stages.empty()) return "none";
  std::string s;
  for (int v : stages) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

inline training::RunConfig ablation_config(const training::RunConfig& base, const std::vector<int>& stages) {
  training::RunConfig cfg = base;
  cfg.net.srw_stages = stages;
  return stages.empty() ? baseline_of(cfg) : cfg;
}

inline std::string format_ablation_table(const std::vector<RunOutcome>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %-18s %-18s %-10s\n", "srw_stages", "target IoU", "source IoU", "best epoch");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %.4f +- %.4f    %.4f +- %.4f    %d\n",
                  stages_label(r.config.net.srw_stages).c_str(), r.target["iou"].mean, r.target["iou"].std,
                  r.source["iou"].mean, r.source["iou"].std, r.best_epoch);
    out += line;
  }
  return out;
}

}  // namespace srwseg::experiment
