// Acceptance run: one PASS/FAIL line per criterion, details in <out>/acceptance.json.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "srwseg/experiment.hpp"
#include "srwseg/selftest.hpp"

namespace fs = std::filesystem;
using namespace srwseg;

namespace {

constexpr int kSeeds = 5;
constexpr int kEpochs = 30;
constexpr double kMaxSourceDrop = 0.05;
constexpr int kMinTargetWins = 4;
constexpr double kGradientSeconds = 120.0;
constexpr double kWhiteningSeconds = 60.0;
constexpr double kSeparability = 0.95;

struct Line {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void emit(std::vector<Line>& lines, Line line) {
  std::printf("criterion %d: %s  %s  %s\n", line.id, line.passed ? "PASS" : "FAIL", line.name.c_str(),
              line.detail.c_str());
  std::fflush(stdout);
  lines.push_back(std::move(line));
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

/// Model used for the training criteria: the default architecture with narrower stages, so the
/// 2 x 5 x 30-epoch sweep fits a single CPU core.
training::RunConfig acceptance_config() {
  training::RunConfig cfg;
  cfg.train.epochs = kEpochs;
  cfg.net.stage_channels = {16, 32, 64, 64};
  cfg.net.aspp_channels = 32;
  cfg.net.decoder_channels = 32;
  return cfg;
}

nlohmann::json outcome_json(const experiment::RunOutcome& o) {
  nlohmann::json j{{"label", o.label},
                   {"seed", o.config.train.seed},
                   {"srw_stages", o.config.net.srw_stages},
                   {"best_epoch", o.best_epoch},
                   {"best_val_iou", o.best_val_iou},
                   {"source_iou", o.source["iou"].mean},
                   {"source_iou_std", o.source["iou"].std},
                   {"target_iou", o.target["iou"].mean},
                   {"target_iou_std", o.target["iou"].std}};
  for (const auto& e : o.log) j["log"].push_back(e.to_json());
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SRW acceptance criteria"};
  std::string out = "acceptance";
  app.add_option("--out", out, "directory for run logs and acceptance.json");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(out);
  std::vector<Line> lines;
  nlohmann::json results;

  try {
    // 1. gradient suite
    {
      const auto t0 = std::chrono::steady_clock::now();
      const auto checks = selftest::gradient_suite(0);
      const double secs = seconds_since(t0);
      std::printf("%s", selftest::format_table(checks).c_str());
      double worst_component = 0, end_to_end = 0;
      for (const auto& c : checks) {
        (c.name == "end_to_end" ? end_to_end : worst_component) =
            std::max(c.name == "end_to_end" ? end_to_end : worst_component, c.value);
      }
      const bool ok = selftest::all_passed(checks) && secs < kGradientSeconds;
      emit(lines, {1, "gradient suite", ok,
                   fmt("worst component rel err %.2e (< 1e-4), end-to-end %.2e (< 1e-3), %.1fs (< 120s)",
                       worst_component, end_to_end, secs)});
      results["gradient"] = {{"worst_component", worst_component}, {"end_to_end", end_to_end}, {"seconds", secs}};
    }

    // 2. algebraic invariants
    {
      const auto checks = selftest::invariant_suite(0);
      std::string detail;
      for (const auto& c : checks) detail += c.name + " " + c.detail + "; ";
      emit(lines, {2, "algebraic invariants", selftest::all_passed(checks), detail});
    }

    // 3. kmeans oracle
    {
      const auto c = selftest::kmeans_oracle_property();
      emit(lines, {3, "kmeans_1d oracle equivalence", c.passed, c.detail + " (sizes 2..10, 200 seeds)"});
    }

    // 4. whitening efficacy
    {
      const auto t0 = std::chrono::steady_clock::now();
      const auto c = selftest::whitening_efficacy_property(0);
      const double secs = seconds_since(t0);
      emit(lines, {4, "whitening efficacy", c.passed && secs < kWhiteningSeconds,
                   c.detail + fmt(", %.1fs (< 60s)", secs)});
      results["whitening_reduction"] = c.value;
    }

    // 5. generalization trend: baseline vs full SRW over five seeds on the fixed corpus
    const auto corpus = synth::generate_corpus(synth::CorpusConfig{});
    const auto data = experiment::split_corpus(corpus);
    const auto base_cfg = acceptance_config();
    std::vector<experiment::RunOutcome> baseline, full;
    for (int seed = 0; seed < kSeeds; ++seed) {
      auto cfg = base_cfg;
      cfg.train.seed = static_cast<std::uint64_t>(seed);
      for (const bool srw : {false, true}) {
        const auto run_cfg = srw ? cfg : experiment::baseline_of(cfg);
        const std::string label = (srw ? "srw-seed" : "baseline-seed") + std::to_string(seed);
        const auto t0 = std::chrono::steady_clock::now();
        auto o = experiment::run(run_cfg, data, label, fs::path(out) / "runs" / label);
        std::printf("  %-16s source IoU %.4f  target IoU %.4f  best epoch %2d  (%.0fs)\n", label.c_str(),
                    o.source["iou"].mean, o.target["iou"].mean, o.best_epoch, seconds_since(t0));
        std::fflush(stdout);
        results["runs"].push_back(outcome_json(o));
        (srw ? full : baseline).push_back(std::move(o));
      }
    }
    int wins = 0;
    double src_base = 0, src_full = 0, tgt_base = 0, tgt_full = 0;
    std::vector<double> full_targets;
    for (int s = 0; s < kSeeds; ++s) {
      wins += full[s].target["iou"].mean > baseline[s].target["iou"].mean;
      src_base += baseline[s].source["iou"].mean / kSeeds;
      src_full += full[s].source["iou"].mean / kSeeds;
      tgt_base += baseline[s].target["iou"].mean / kSeeds;
      tgt_full += full[s].target["iou"].mean / kSeeds;
      full_targets.push_back(full[s].target["iou"].mean);
    }
    const double drop = src_base - src_full;
    emit(lines, {5, "generalization trend", wins >= kMinTargetWins && drop <= kMaxSourceDrop,
                 fmt("SRW target IoU higher on %.0f/5 seeds (need >= 4); mean target %.4f vs %.4f; source drop %.4f "
                     "(<= 0.05)",
                     wins, tgt_full, tgt_base, drop) +
                     fmt("; mean source %.4f vs %.4f", src_full, src_base)});
    results["generalization"] = {{"wins", wins},           {"mean_target_srw", tgt_full},
                                 {"mean_target_base", tgt_base}, {"mean_source_srw", src_full},
                                 {"mean_source_base", src_base}, {"source_drop", drop}};

    // 6. ablation over SRW stage sets, seed 0; the empty and full sets reuse the runs above
    {
      std::vector<experiment::RunOutcome> rows;
      for (const auto& stages : experiment::ablation_stage_sets()) {
        if (stages.empty()) {
          rows.push_back(baseline[0]);
        } else if (stages == base_cfg.net.srw_stages) {
          rows.push_back(full[0]);
        } else {
          const auto cfg = experiment::ablation_config(base_cfg, stages);
          const std::string label = "ablate-srw-" + experiment::stages_label(stages);
          rows.push_back(experiment::run(cfg, data, label, fs::path(out) / "runs" / label));
          results["runs"].push_back(outcome_json(rows.back()));
        }
      }
      const std::string table = experiment::format_ablation_table(rows);
      std::printf("%s", table.c_str());
      std::ofstream(fs::path(out) / "ablation.txt") << table;
      double best = 0;
      std::string best_label;
      for (const auto& r : rows) {
        if (r.target["iou"].mean > best) best = r.target["iou"].mean, best_label = experiment::stages_label(r.config.net.srw_stages);
      }
      const double noise = eval::mean_std(full_targets).std;
      const double gap = best - rows.back().target["iou"].mean;
      const std::string verdict = gap == 0.0 ? "{1,2,3} is best"
                                  : gap <= noise
                                      ? fmt("{1,2,3} within noise of best (gap %.4f <= seed std %.4f)", gap, noise)
                                      : fmt("{1,2,3} NOT within noise of best (gap %.4f > seed std %.4f)", gap, noise);
      emit(lines, {6, "ablation table (reported, not gated)", rows.size() == 4,
                   "4 rows over {none, 1, 1-2, 1-3}; best " + best_label + "; " + verdict});
      results["ablation"] = {{"best", best_label}, {"gap", gap}, {"noise", noise}};
    }

    // 7. reproducibility: same seed twice gives identical epoch logs and final metrics
    {
      auto cfg = base_cfg;
      cfg.train.epochs = 6;
      cfg.train.warmup_epochs = 2;
      cfg.train.train_limit = 96;
      cfg.train.seed = 11;
      const auto a = experiment::run(cfg, data, "repro-a");
      const auto b = experiment::run(cfg, data, "repro-b");
      bool same = a.log.size() == b.log.size();
      for (std::size_t i = 0; same && i < a.log.size(); ++i) {
        same = a.log[i].to_json() == b.log[i].to_json() && a.log[i].total_loss == b.log[i].total_loss;
      }
      for (const auto& name : eval::kMetricNames) {
        same = same && a.source[name].mean == b.source[name].mean && a.target[name].mean == b.target[name].mean &&
               a.source[name].std == b.source[name].std && a.target[name].std == b.target[name].std;
      }
      emit(lines, {7, "reproducibility", same,
                   fmt("%.0f-epoch SRW run twice with seed 11: logs and test metrics ", static_cast<double>(a.log.size())) +
                       (same ? "identical" : "DIFFER")});
    }

    // 8. data contract
    {
      const fs::path root = fs::path(out) / "corpus";
      const auto manifest = synth::build_corpus(synth::CorpusConfig{}, root, true);
      manifest.validate();
      const auto loaded = synth::load_dataset(root);
      bool ok = loaded.manifest.has_value() && loaded.manifest->to_json() == corpus.manifest.to_json() &&
                loaded.size() == corpus.samples.size();
      for (std::size_t i = 0; ok && i < loaded.size(); ++i) {
        const auto& x = loaded.samples[i];
        const auto& y = corpus.samples[i];
        ok = x.id == y.id && x.mask.storage() == y.mask.storage() &&
             synth::to_image8(x.image).pixels == synth::to_image8(y.image).pixels;
      }
      const double sep = synth::modality_separability(200);
      emit(lines, {8, "data contract", ok && sep >= kSeparability,
                   std::string(ok ? "round-trip of " + std::to_string(loaded.size()) + " samples and manifest intact"
                                  : "round-trip MISMATCH") +
                       fmt("; modality separability %.3f (>= 0.95)", sep)});
      fs::remove_all(root);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 1;
  }

  bool all = true;
  for (const auto& l : lines) {
    all = all && l.passed;
    results["criteria"].push_back({{"id", l.id}, {"name", l.name}, {"passed", l.passed}, {"detail", l.detail}});
  }
  std::ofstream(fs::path(out) / "acceptance.json") << results.dump(2) << "\n";
  std::printf("acceptance: %s\n", all ? "all criteria passed" : "FAILED");
  return all ? 0 : 1;
}
