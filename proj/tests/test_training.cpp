#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "srwseg/training.hpp"

using namespace srwseg;
using namespace srwseg::training;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("srwseg_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

network::NetworkConfig tiny_net(int size = 32) {
  network::NetworkConfig c;
  c.stage_channels = {4, 8, 8, 8};
  c.input_h = c.input_w = size;
  c.aspp_channels = 8;
  c.low_level_channels = 4;
  c.decoder_channels = 8;
  c.reduction = 2;
  return c;
}

synth::Dataset scenes(int n, int size, std::uint64_t seed0) {
  synth::Dataset d;
  for (int i = 0; i < n; ++i) {
    auto scene = synth::generate_scene(seed0 + i, size);
    synth::SamplePair s;
    s.image = scene.image;
    s.mask = scene.mask;
    s.id = "s" + std::to_string(i);
    d.samples.push_back(std::move(s));
  }
  return d;
}

template <class T>
Tensor<T> batch_of(const synth::Dataset& d, int n) {
  std::vector<const Tensor<float>*> ptrs;
  for (int i = 0; i < n; ++i) ptrs.push_back(&d.samples[i].image);
  return eval::stack_images<T>(ptrs);
}

Tensor<int> masks_of(const synth::Dataset& d, int n) {
  std::vector<const synth::Mask*> ptrs;
  for (int i = 0; i < n; ++i) ptrs.push_back(&d.samples[i].mask);
  return eval::stack_masks(ptrs);
}

isw::WhiteningMask all_offdiagonal(int c) {
  auto m = isw::WhiteningMask::empty(c);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j)
      if (i != j) m.m[i * c + j] = 1, ++m.selected_count;
  return m;
}

struct Fixture {
  network::Model<double> model;
  Tensor<double> x, xa;
  Tensor<int> y;
  std::vector<isw::WhiteningMask> masks;

  explicit Fixture(std::uint64_t seed) : model(tiny_net(), seed) {
    const auto d = scenes(2, 32, 40 + seed);
    x = batch_of<double>(d, 2);
    y = masks_of(d, 2);
    xa = x;
    for (auto& v : xa.values()) v = 0.8 * v + 0.05;
    for (int s : model.config().srw_stages) masks.push_back(all_offdiagonal(model.config().stage_channels[s - 1]));
  }

  network::ForwardArtifacts<double> forward() { return model.forward(x, &xa, network::Mode::Train); }

  std::vector<Tensor<double>> grads(const TrainingConfig& cfg, Phase phase) {
    model.zero_grad();
    auto art = forward();
    auto b = total_loss(art, y, masks, cfg, phase);
    backward(b.graph);
    std::vector<Tensor<double>> g;
    for (auto& p : model.parameters()) g.push_back(p.grad());
    return g;
  }
};

}  // namespace

TEST(PolyLr, ClosedFormValues) {
  EXPECT_DOUBLE_EQ(poly_lr(1e-2, 0, 100, 0.9), 1e-2);
  EXPECT_EQ(poly_lr(1e-2, 100, 100, 0.9), 0.0);
  EXPECT_EQ(poly_lr(1e-2, 150, 100, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(1e-2, 50, 100, 0.9), 5.359e-3, 1e-6);
  EXPECT_DOUBLE_EQ(poly_lr(1e-2, 50, 100, 0.9), 0.01 * std::pow(0.5, 0.9));
}

TEST(PolyLr, NonIncreasing) {
  double prev = poly_lr(0.05, 0, 997, 0.9);
  for (long s = 1; s <= 1000; ++s) {
    const double lr = poly_lr(0.05, s, 997, 0.9);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, 0.0);
    prev = lr;
  }
  EXPECT_THROW(poly_lr(0.01, -1, 10, 0.9), ValidationError);
  EXPECT_THROW(poly_lr(0.01, 0, 0, 0.9), ValidationError);
}

TEST(TotalLoss, ZeroWeightsLeaveTaskOnly) {
  Fixture f(1);
  TrainingConfig cfg;
  cfg.lambda_isw = 0.0;
  cfg.lambda_dc = 0.0;
  auto art = f.forward();
  const auto b = total_loss(art, f.y, f.masks, cfg, Phase::Full);
  EXPECT_EQ(b.total, b.task);
  EXPECT_NEAR(static_cast<double>(b.graph.item()), b.task, 1e-12);
  EXPECT_GT(b.isw_sum(), 0.0);
  EXPECT_GT(b.dc_sum(), 0.0);
}

TEST(TotalLoss, ConfidentCorrectLogitsGiveZeroTask) {
  Fixture f(2);
  TrainingConfig cfg;
  auto art = f.forward();
  Tensor<double> logits(art.logits.value().shape());
  const int n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < hw; ++p) {
      const int cls = f.y[b * hw + p];
      logits[(b * 2 + 0) * hw + p] = cls == 0 ? 50.0 : -50.0;
      logits[(b * 2 + 1) * hw + p] = cls == 1 ? 50.0 : -50.0;
    }
  art.logits = Var<double>(logits);
  const auto bundle = total_loss(art, f.y, f.masks, cfg, Phase::Full);
  EXPECT_LT(bundle.task, 1e-40);
  double aux = 0.0;
  for (std::size_t l = 0; l < art.stages.size(); ++l) {
    aux += cfg.lambda_isw * bundle.isw_per_layer[l] + cfg.lambda_dc * bundle.dc_per_layer[l];
  }
  EXPECT_NEAR(bundle.total, aux, 1e-12);
}

TEST(TotalLoss, WarmupHasNoWhiteningTerm) {
  Fixture f(3);
  TrainingConfig cfg;
  auto art = f.forward();
  const auto b = total_loss(art, f.y, f.masks, cfg, Phase::Warmup);
  ASSERT_EQ(b.isw_per_layer.size(), 3u);
  for (double v : b.isw_per_layer) EXPECT_EQ(v, 0.0);
}

TEST(TotalLoss, RecomposesExactlyFromParts) {
  Fixture f(4);
  TrainingConfig cfg;
  cfg.lambda_isw = 0.37;
  cfg.lambda_dc = 1.9;
  auto art = f.forward();
  const auto b = total_loss(art, f.y, f.masks, cfg, Phase::Full);
  double total = b.task;
  for (std::size_t l = 0; l < b.dc_per_layer.size(); ++l) {
    total += cfg.lambda_isw * b.isw_per_layer[l] + cfg.lambda_dc * b.dc_per_layer[l];
  }
  EXPECT_EQ(total, b.total);
  EXPECT_NEAR(static_cast<double>(b.graph.item()), b.total, 1e-10 * b.total);
}

TEST(TotalLoss, WhiteningIsAverageOfBothPaths) {
  Fixture f(5);
  TrainingConfig cfg;
  auto art = f.forward();
  const auto b = total_loss(art, f.y, f.masks, cfg, Phase::Full);
  for (std::size_t l = 0; l < art.stages.size(); ++l) {
    const double raw = isw::isw_loss(art.per_stage_theta_raw[l], f.masks[l]).item();
    const double aug = isw::isw_loss(art.per_stage_theta_aug[l], f.masks[l]).item();
    EXPECT_NEAR(b.isw_per_layer[l], 0.5 * (raw + aug), 1e-14);
  }
}

TEST(TotalLoss, WarmupGradientHasNoWhiteningSource) {
  Fixture f(6);
  TrainingConfig cfg;
  const auto warm = f.grads(cfg, Phase::Warmup);
  TrainingConfig no_isw = cfg;
  no_isw.lambda_isw = 0.0;
  const auto full_without = f.grads(no_isw, Phase::Full);
  const auto full_with = f.grads(cfg, Phase::Full);
  double diff_without = 0.0, diff_with = 0.0;
  for (std::size_t i = 0; i < warm.size(); ++i) {
    for (std::size_t k = 0; k < warm[i].size(); ++k) {
      diff_without = std::max(diff_without, std::abs(warm[i][k] - full_without[i][k]));
      diff_with = std::max(diff_with, std::abs(warm[i][k] - full_with[i][k]));
    }
  }
  EXPECT_LT(diff_without, 1e-12);
  EXPECT_GT(diff_with, 1e-6);
}

TEST(TotalLoss, RejectsNonBinaryTarget) {
  Fixture f(7);
  auto art = f.forward();
  Tensor<int> bad = f.y;
  bad[0] = 2;
  EXPECT_THROW(total_loss(art, bad, f.masks, TrainingConfig{}, Phase::Full), ValidationError);
}

TEST(Sgd, MatchesHandComputedMomentumSteps) {
  Var<double> p(Tensor<double>({2}, {1.0, -2.0}), true);
  Sgd<double> opt({p}, 0.9, 0.1);
  const double g[2][2] = {{0.5, 1.0}, {-0.25, 2.0}};
  double w[2] = {1.0, -2.0}, v[2] = {0.0, 0.0};
  for (int step = 0; step < 2; ++step) {
    opt.zero_grad();
    p.mutable_grad() = Tensor<double>({2}, {g[step][0], g[step][1]});
    opt.step(0.01);
    for (int k = 0; k < 2; ++k) {
      const double d = g[step][k] + 0.1 * w[k];
      v[k] = step == 0 ? d : 0.9 * v[k] + d;
      w[k] -= 0.01 * v[k];
      EXPECT_DOUBLE_EQ(p.value()[k], w[k]);
    }
  }
}

TEST(Config, DefaultsMatchTheTrainingProtocol) {
  const TrainingConfig c;
  EXPECT_EQ(c.lr0, 1e-2);
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.epochs, 50);
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_EQ(c.warmup_epochs, 5);
  EXPECT_EQ(c.poly_power, 0.9);
  EXPECT_EQ(c.weight_decay, 0.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ParsesTextAndRoundTrips) {
  RunConfig cfg;
  apply_config_text(cfg, "# comment\nlr0 = 0.05\n\nsrw_stages = 1,2  # inline\nstage_channels=8,16,32,32\naugment = false\n");
  EXPECT_EQ(cfg.train.lr0, 0.05);
  EXPECT_EQ(cfg.net.srw_stages, (std::vector<int>{1, 2}));
  EXPECT_EQ(cfg.net.stage_channels[3], 32);
  EXPECT_FALSE(cfg.train.augment);
  apply_assignment(cfg, "srw_stages=none");
  EXPECT_TRUE(cfg.net.srw_stages.empty());

  RunConfig back;
  apply_config_text(back, to_config_text(cfg));
  EXPECT_EQ(to_config_text(back), to_config_text(cfg));
}

TEST(Config, ErrorsNameKeyAndLine) {
  RunConfig cfg;
  try {
    apply_config_text(cfg, "lr0 = 0.1\nbogus = 3\n", "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos) << e.what();
  }
  EXPECT_THROW(apply_assignment(cfg, "epochs=ten"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "epochs"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "stage_channels=1,2"), ConfigError);
  RunConfig bad;
  bad.train.warmup_epochs = bad.train.epochs;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.train.lr0 = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripGivesIdenticalLogits) {
  network::Model<float> model(tiny_net(), 12);
  const auto d = scenes(2, 32, 70);
  const auto x = batch_of<float>(d, 2);
  model.forward(x, &x, network::Mode::Train);  // moves the BN running stats off their init
  TempDir dir("ckpt");
  ckpt::save_checkpoint(dir.path / "m.ckpt", model, {{"epoch", 3}});
  auto loaded = ckpt::load_checkpoint<float>(dir.path / "m.ckpt");
  EXPECT_EQ(loaded.meta.at("epoch"), 3);
  auto copy = std::move(loaded.model);
  const auto a = model.predict_logits(x);
  const auto b = copy.predict_logits(x);
  EXPECT_EQ(a.storage(), b.storage());
  EXPECT_THROW(ckpt::load_checkpoint<float>(dir.path / "missing.ckpt"), IoError);
  std::ofstream(dir.path / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(ckpt::load_checkpoint<float>(dir.path / "junk.ckpt"), ValidationError);
}

TEST(Train, SmokeRunWritesLoadableCheckpoints) {
  RunConfig cfg;
  cfg.net = tiny_net();
  cfg.train.epochs = 2;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 4;
  const auto data = scenes(16, 32, 200);
  const auto val = scenes(4, 32, 300);
  TempDir dir("smoke");
  int callbacks = 0;
  auto r = train<float>(cfg, data, val, {dir.path, "smoke", [&](const EpochLog&) { ++callbacks; }});
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(callbacks, 2);
  for (const auto& e : r.log) {
    EXPECT_TRUE(std::isfinite(e.task_loss));
    EXPECT_TRUE(std::isfinite(e.total_loss));
    EXPECT_GE(e.val_iou, 0.0);
  }
  EXPECT_EQ(r.log[0].isw_loss, 0.0);
  EXPECT_GT(r.log[1].isw_loss, 0.0);

  std::ifstream log(dir.path / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "lr", "task_loss", "dc_loss", "isw_loss", "val_iou"}) EXPECT_TRUE(j.contains(k)) << k;
    ++lines;
  }
  EXPECT_EQ(lines, 2);

  auto last = ckpt::load_checkpoint<float>(dir.path / "last.ckpt");
  auto best = ckpt::load_checkpoint<float>(dir.path / "best.ckpt");
  EXPECT_EQ(best.meta.at("epoch"), r.best_epoch);
  const auto stats = isw_state_from_json(last.meta.at("isw_state"));
  ASSERT_EQ(stats.size(), 3u);
  EXPECT_EQ(stats[0].warm_samples, 4 * 2);  // one update per step, 4 steps per epoch
  EXPECT_EQ(stats[0].ema.shape(), (Shape{4, 4}));
  EXPECT_EQ(stats[2].ema.shape(), (Shape{8, 8}));
  EXPECT_EQ(stats[1].momentum, cfg.train.ema_momentum);
  const auto x = batch_of<float>(val, 4);
  EXPECT_EQ(last.model.predict_logits(x).storage(), r.model.predict_logits(x).storage());
  auto from_memory = best_model(r, cfg);
  EXPECT_EQ(best.model.predict_logits(x).storage(), from_memory.predict_logits(x).storage());
}

TEST(Train, SameSeedGivesIdenticalCurves) {
  RunConfig cfg;
  cfg.net = tiny_net();
  cfg.train.epochs = 3;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 4;
  cfg.train.seed = 9;
  const auto data = scenes(8, 32, 400);
  const auto val = scenes(2, 32, 500);
  const auto a = train<float>(cfg, data, val);
  const auto b = train<float>(cfg, data, val);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].total_loss, b.log[i].total_loss);
    EXPECT_EQ(a.log[i].isw_loss, b.log[i].isw_loss);
    EXPECT_EQ(a.log[i].val_iou, b.log[i].val_iou);
  }
  cfg.train.seed = 10;
  const auto c = train<float>(cfg, data, val);
  EXPECT_NE(a.log.back().total_loss, c.log.back().total_loss);
}

TEST(Train, RejectsMismatchedInputSize) {
  RunConfig cfg;
  cfg.net = tiny_net();
  cfg.train.epochs = 2;
  cfg.train.warmup_epochs = 1;
  EXPECT_THROW(train<float>(cfg, scenes(4, 64, 1), {}), ValidationError);
  EXPECT_THROW(train<float>(cfg, synth::Dataset{}, {}), ValidationError);
}

TEST(Train, DivergenceAbortsWithDump) {
  RunConfig cfg;
  cfg.net = tiny_net();
  cfg.train.epochs = 2;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 4;
  cfg.train.lr0 = 1e30;
  TempDir dir("diverge");
  try {
    train<float>(cfg, scenes(8, 32, 600), {}, {dir.path});
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("grad_norms"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir.path / "divergence.json"));
  }
}

// Baseline oracle: the source task is easy, so a plain network must learn it.
TEST(Train, BaselineLearnsSourceTask) {
  RunConfig cfg;
  cfg.net.stage_channels = {16, 32, 64, 64};
  cfg.net.aspp_channels = 32;
  cfg.net.decoder_channels = 32;
  cfg.net.srw_stages.clear();
  cfg.train.epochs = 20;
  synth::CorpusConfig cc;
  cc.source_count = 260;
  cc.target_count = 4;
  const auto corpus = synth::generate_corpus(cc);
  synth::Dataset tr, val;
  for (const auto& s : corpus.samples) {
    if (s.modality != synth::Modality::Source) continue;
    (tr.size() < 200 ? tr : val).samples.push_back(s);
  }
  const auto r = train<float>(cfg, tr, val);
  const double first = r.log.front().task_loss, last = r.log.back().task_loss;
  std::cout << "baseline: epoch1 loss " << first << ", epoch20 loss " << last << ", best val IoU " << r.best_val_iou
            << " (epoch " << r.best_epoch << ")\n";
  EXPECT_GT(r.best_val_iou, 0.6);
  EXPECT_LT(last, 0.5 * first);
}
