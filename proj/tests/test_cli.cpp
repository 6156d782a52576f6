#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "srwseg/config.hpp"
#include "srwseg/evaluation.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SRWSEG_CLI) + " " + args + " 2>&1";
  Result r{-1, {}};
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / ("srwseg_cli_" + std::to_string(::getpid())); }
  static fs::path corpus() { return root() / "corpus"; }
  static std::string tiny() {
    return "--set stage_channels=4,8,8,8 --set aspp_channels=8 --set decoder_channels=8 --set low_level_channels=4 "
           "--set input_h=32 --set input_w=32 --set epochs=2 --set warmup_epochs=1 --set batch_size=4 ";
  }
  static void SetUpTestSuite() {
    fs::remove_all(root());
    const auto r = run("synthgen --out " + corpus().string() + " --source-count 20 --target-count 4 --size 32");
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() {
    std::error_code ec;
    fs::remove_all(root(), ec);
  }
};

}  // namespace

TEST_F(Cli, HelpDocumentsEveryConfigKey) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const auto& k : srwseg::training::config_keys()) EXPECT_NE(r.output.find(k.name), std::string::npos) << k.name;
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  auto r = run("train --out " + (root() / "x").string() + " --data " + corpus().string() + " --set bogus=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("bogus"), std::string::npos) << r.output;
  r = run("train --out " + (root() / "x").string() + " --data " + (root() / "nowhere").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("nowhere"), std::string::npos) << r.output;
  const fs::path cfg = root() / "bad.cfg";
  std::ofstream(cfg) << "lr0 = fast\n";
  r = run("train --out " + (root() / "x").string() + " --data " + corpus().string() + " --config " + cfg.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("bad.cfg:1"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(root() / "x"));
  EXPECT_FALSE(fs::exists(root() / "x.partial"));
}

TEST_F(Cli, EvalWithMissingCheckpointNamesThePath) {
  const std::string missing = (root() / "no_such.ckpt").string();
  const auto r = run("eval --checkpoint " + missing + " --data " + corpus().string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
}

TEST_F(Cli, SynthgenRefusesToOverwriteWithoutForce) {
  EXPECT_EQ(run("synthgen --out " + corpus().string() + " --source-count 20 --target-count 4 --size 32").code, 2);
  const auto r = run("synthgen --out " + corpus().string() + " --source-count 20 --target-count 4 --size 32 --force");
  EXPECT_EQ(r.code, 0) << r.output;
}

TEST_F(Cli, TrainThenEvalWritesArtifacts) {
  const fs::path out = root() / "run";
  auto r = run("train --out " + out.string() + " --data " + corpus().string() + " " + tiny() + "--seed 3");
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"train_log.jsonl", "best.ckpt", "last.ckpt", "config.txt", "report_test-source.json",
                        "report_test-target.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(run("train --out " + out.string() + " --data " + corpus().string() + " " + tiny()).code, 2);

  const fs::path overlays = root() / "overlays";
  r = run("eval --checkpoint " + (out / "best.ckpt").string() + " --data " + corpus().string() +
          " --split test-target --overlays " + overlays.string() + " --overlay-limit 3");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto report = srwseg::eval::load_report(out / "report_test-target.json");
  EXPECT_EQ(report.split, "test-target");
  EXPECT_EQ(report.n(), 4);
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(overlays)) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 3);
}

TEST_F(Cli, SelftestPasses) {
  const auto r = run("selftest");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("all checks passed"), std::string::npos);
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

TEST_F(Cli, AblateProducesFourRows) {
  const fs::path out = root() / "ablate";
  const auto r = run("ablate --out " + out.string() + " --data " + corpus().string() + " " + tiny());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream f(out / "ablation.json");
  const auto j = nlohmann::json::parse(f);
  ASSERT_EQ(j.size(), 4u);
  EXPECT_TRUE(j[0]["srw_stages"].empty());
  EXPECT_EQ(j[3]["srw_stages"], (std::vector<int>{1, 2, 3}));
}
