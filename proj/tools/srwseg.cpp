// srwseg: corpus generation, training, evaluation, self-test and the SRW-stage ablation.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
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

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct RunArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string data;
  std::uint64_t corpus_seed = 0;
};

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("--config", a.config_file, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.overrides, "override a config key, e.g. --set lr0=0.02 (repeatable)");
  cmd->add_option("--seed", a.seed, "training seed (overrides the config's seed)")
      ->each([&a](const std::string&) { a.seed_given = true; });
  cmd->add_option("--data", a.data, "corpus directory (default: the cached synthetic corpus)");
  cmd->add_option("--corpus-seed", a.corpus_seed, "seed of the cached synthetic corpus");
}

training::RunConfig resolve_config(const RunArgs& a) {
  training::RunConfig cfg;
  if (!a.config_file.empty()) training::apply_config_file(cfg, a.config_file);
  for (const auto& o : a.overrides) training::apply_assignment(cfg, o);
  if (a.seed_given) cfg.train.seed = a.seed;
  cfg.validate();
  return cfg;
}

fs::path cache_root() {
  const char* env = std::getenv("SRWSEG_CACHE");
  return env && *env ? fs::path(env) : fs::path(".srwseg-cache");
}

/// The explicit --data directory, or the default synthetic corpus, generated into the cache on
/// first use.
fs::path resolve_corpus(const RunArgs& a) {
  if (!a.data.empty()) {
    if (!fs::is_directory(a.data)) throw IoError("corpus directory not found: " + a.data);
    return a.data;
  }
  const fs::path dir = cache_root() / ("corpus-seed" + std::to_string(a.corpus_seed));
  if (!fs::exists(dir / "manifest.json")) {
    synth::CorpusConfig cc;
    cc.seed = a.corpus_seed;
    std::cerr << "generating synthetic corpus into " << dir << "\n";
    synth::build_corpus(cc, dir, true);
  }
  return dir;
}

experiment::Splits load_splits(const fs::path& root, const training::RunConfig& cfg) {
  synth::LoadOptions opts;
  opts.resize = cfg.net.input_h == cfg.net.input_w ? cfg.net.input_h : 0;
  const auto all = synth::load_dataset(root, opts);
  if (!all.manifest) throw ValidationError("corpus " + root.string() + " has no manifest.json with split assignments");
  auto splits = experiment::split_corpus(all);
  if (splits.train.empty()) throw ValidationError("corpus " + root.string() + " has an empty train split");
  return splits;
}

void print_epoch(const training::EpochLog& e) {
  std::fprintf(stderr, "epoch %3d  lr %.5f  task %.4f  dc %.4f  isw %.4f  val IoU %.4f  (%.1fs)\n", e.epoch, e.lr,
               e.task_loss, e.dc_loss, e.isw_loss, e.val_iou, e.seconds);
}

/// Runs `body` against `<out>.partial` and renames it into place only on success.
template <class F>
void staged(const fs::path& out, bool force, F&& body) {
  if (fs::exists(out) && !force) {
    throw ConfigError("output directory " + out.string() + " already exists (use --force to overwrite)");
  }
  const fs::path staging = out.string() + ".partial";
  fs::remove_all(staging);
  try {
    body(staging);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  fs::remove_all(out);
  fs::rename(staging, out);
}

std::string keys_help() {
  std::string s = "Config keys (for --config files and --set):\n";
  const training::RunConfig defaults;
  for (const auto& k : training::config_keys()) {
    s += "  " + k.name + " (default " + k.get(defaults) + "): " + k.help + "\n";
  }
  s += "\nExit codes: 0 ok, 1 internal error, 2 usage or config error.\n"
       "SRWSEG_CACHE redirects the cached synthetic corpus (default ./.srwseg-cache).\n";
  return s;
}

void print_summary(const eval::MetricsReport& r) {
  std::printf("%s on %s (n=%d)\n", r.model.c_str(), r.split.c_str(), r.n());
  for (const auto& name : eval::kMetricNames) {
    std::printf("  %-14s %.4f +- %.4f\n", name.c_str(), r[name].mean, r[name].std);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SRW domain-generalizable lesion segmentation"};
  app.footer(keys_help());
  app.require_subcommand(1);

  // synthgen
  auto* synthgen = app.add_subcommand("synthgen", "generate the synthetic source/target corpus");
  synth::CorpusConfig corpus_cfg;
  std::string synth_out;
  bool synth_force = false;
  synthgen->add_option("--out", synth_out, "output directory (default: the cache location)");
  synthgen->add_option("--seed", corpus_cfg.seed, "corpus seed");
  synthgen->add_option("--source-count", corpus_cfg.source_count, "source scenes (split train/val/test-source)");
  synthgen->add_option("--target-count", corpus_cfg.target_count, "target scenes (test-target only)");
  synthgen->add_option("--size", corpus_cfg.size, "square image size");
  synthgen->add_flag("--force", synth_force, "overwrite an existing directory");

  // train
  auto* train = app.add_subcommand("train", "train a model; writes train_log.jsonl, best.ckpt, last.ckpt");
  RunArgs train_args;
  std::string train_out;
  bool train_force = false;
  add_run_options(train, train_args);
  train->add_option("--out", train_out, "run directory")->required();
  train->add_flag("--force", train_force, "overwrite an existing run directory");

  // eval
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  RunArgs eval_args;
  std::string ckpt_path, eval_split = "test-target", report_path, overlay_dir;
  int overlay_limit = 16;
  evalc->add_option("--checkpoint", ckpt_path, "SRWSEG1 checkpoint")->required();
  evalc->add_option("--data", eval_args.data, "corpus directory (default: the cached synthetic corpus)");
  evalc->add_option("--corpus-seed", eval_args.corpus_seed, "seed of the cached synthetic corpus");
  evalc->add_option("--split", eval_split, "train, val, test-source, test-target, or all");
  evalc->add_option("--report", report_path, "report path (default: <checkpoint dir>/report_<split>.json)");
  evalc->add_option("--overlays", overlay_dir, "also write boundary overlays to this directory");
  evalc->add_option("--overlay-limit", overlay_limit, "maximum number of overlays")->check(CLI::NonNegativeNumber);

  // selftest
  auto* selftest = app.add_subcommand("selftest", "gradient checks and property oracles");
  std::uint64_t selftest_seed = 0;
  selftest->add_option("--seed", selftest_seed, "seed of the random test tensors");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train with srw_stages none, 1, 1-2, 1-3 and compare target IoU");
  RunArgs ablate_args;
  std::string ablate_out;
  bool ablate_force = false;
  add_run_options(ablate, ablate_args);
  ablate->add_option("--out", ablate_out, "directory for the four runs and the table")->required();
  ablate->add_flag("--force", ablate_force, "overwrite an existing directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synthgen) {
      const fs::path out = synth_out.empty() ? cache_root() / ("corpus-seed" + std::to_string(corpus_cfg.seed))
                                             : fs::path(synth_out);
      const auto manifest = synth::build_corpus(corpus_cfg, out, synth_force);
      const auto counts = manifest.counts();
      std::printf("wrote %s:", out.c_str());
      for (const auto& [split, n] : counts) std::printf(" %s=%d", split.c_str(), n);
      std::printf("\n");
    } else if (*train) {
      const auto cfg = resolve_config(train_args);
      const auto data = load_splits(resolve_corpus(train_args), cfg);
      staged(train_out, train_force, [&](const fs::path& dir) {
        const auto o = experiment::run(cfg, data, fs::path(train_out).filename().string(), dir, print_epoch);
        std::printf("best epoch %d (val IoU %.4f)\n", o.best_epoch, o.best_val_iou);
        print_summary(o.source);
        print_summary(o.target);
      });
    } else if (*evalc) {
      if (!fs::exists(ckpt_path)) throw IoError("checkpoint not found: " + ckpt_path);
      auto ck = ckpt::load_checkpoint<float>(ckpt_path);
      synth::LoadOptions opts;
      opts.split = eval_split == "all" ? "" : eval_split;
      opts.resize = ck.model.config().input_h == ck.model.config().input_w ? ck.model.config().input_h : 0;
      const auto data = synth::load_dataset(resolve_corpus(eval_args), opts);
      const std::string model_id = ck.meta.value("model_id", fs::path(ckpt_path).stem().string());
      const auto report = eval::evaluate(ck.model, data, eval_split, model_id);
      const fs::path rpath = report_path.empty()
                                 ? fs::path(ckpt_path).parent_path() / ("report_" + eval_split + ".json")
                                 : fs::path(report_path);
      eval::export_report(report, rpath);
      print_summary(report);
      std::printf("report: %s\n", rpath.c_str());
      if (!overlay_dir.empty()) {
        const int n = eval::export_overlays(ck.model, data, overlay_dir, overlay_limit);
        std::printf("overlays: %d in %s\n", n, overlay_dir.c_str());
      }
    } else if (*selftest) {
      const auto checks = selftest::run_all(selftest_seed);
      std::printf("%s", selftest::format_table(checks).c_str());
      const bool ok = selftest::all_passed(checks);
      std::printf("selftest: %s\n", ok ? "all checks passed" : "FAILED");
      return ok ? kExitOk : kExitInternal;
    } else if (*ablate) {
      const auto base = resolve_config(ablate_args);
      const auto data = load_splits(resolve_corpus(ablate_args), base);
      staged(ablate_out, ablate_force, [&](const fs::path& dir) {
        std::vector<experiment::RunOutcome> rows;
        nlohmann::json table = nlohmann::json::array();
        for (const auto& stages : experiment::ablation_stage_sets()) {
          const std::string label = "srw-" + experiment::stages_label(stages);
          std::fprintf(stderr, "== %s\n", label.c_str());
          auto cfg = experiment::ablation_config(base, stages);
          rows.push_back(experiment::run(cfg, data, label, dir / label, print_epoch));
          const auto& r = rows.back();
          table.push_back({{"srw_stages", stages},
                           {"target_iou", r.target["iou"].mean},
                           {"target_iou_std", r.target["iou"].std},
                           {"source_iou", r.source["iou"].mean},
                           {"source_iou_std", r.source["iou"].std},
                           {"best_epoch", r.best_epoch}});
        }
        const std::string text = experiment::format_ablation_table(rows);
        std::ofstream(dir / "ablation.txt") << text;
        std::ofstream(dir / "ablation.json") << table.dump(2) << "\n";
        std::printf("%s", text.c_str());
      });
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const LoadError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kExitInternal;
  }
  return kExitOk;
}
