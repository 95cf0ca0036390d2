#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "cli_runner.hpp"

using namespace ssfa::testing;

namespace {

const std::string kCli = SSFA_CLI_PATH;

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    ASSERT_EQ(run("synth --grid 8 --clips 6 --clip-len 10 --per-class 5 --seed 3 --out data").code, 0);
    ASSERT_EQ(run("synth --grid 8 --clips 4 --clip-len 10 --per-class 5 --seed 4 --out held").code, 0);
    ASSERT_EQ(run("mine --clips data/clips.txt --T 2 --max-pairs 100 --max-triplets 100 --seed 1 --out mined").code, 0);
    ASSERT_EQ(run("train --labeled data/labeled.txt --clips data/clips.txt --tuples mined/tuples.txt --hidden 6 "
                  "--features 5 --epochs 5 --seed 2 --out model")
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static CliRun run(const std::string& args) { return run_cli(kCli, args, dir_->path()); }
  static std::string file(const std::string& rel) { return read_bytes(dir_->path() / rel); }
  static bool exists(const std::string& rel) { return std::filesystem::exists(dir_->path() / rel); }

  static TempDir* dir_;
};

TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("bogus").code, 2);
  EXPECT_EQ(run("synth").code, 2);
  EXPECT_EQ(run("synth --out x --no-such-flag").code, 2);
  EXPECT_EQ(run("--config missing.ini synth --out x").code, 2);
  EXPECT_EQ(run("synth --mode wobbly --out x").code, 2);
  EXPECT_EQ(run("train --labeled data/labeled.txt --method magic --out x").code, 2);
}

TEST_F(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"synth", "fixtures", "mine", "train", "eval-seqcomp", "eval-cls", "eval-knn", "gradcheck"}) {
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  }
  EXPECT_EQ(run("train --help").code, 0);
}

TEST_F(Cli, RuntimeErrorsExitThree) {
  EXPECT_EQ(run("mine --clips nowhere.txt --out x").code, 3);
  EXPECT_EQ(run("mine --clips data/clips.txt --T 8 --out x").code, 3);
  EXPECT_EQ(run("eval-cls --checkpoint data/clips.txt --test data/labeled.txt --out x").code, 3);
}

TEST_F(Cli, SynthWritesManifests) {
  EXPECT_TRUE(exists("data/clips.txt"));
  EXPECT_TRUE(exists("data/labeled.txt"));
  EXPECT_TRUE(exists("data/clips/clip0000_0.pgm"));
  const std::string cfg = file("data/effective_config.txt");
  EXPECT_NE(cfg.find("clips=6"), std::string::npos);
  EXPECT_NE(cfg.find("seed=3"), std::string::npos);
}

TEST_F(Cli, ConfigFileAppliesAndFlagsOverride) {
  write_bytes(dir_->path() / "synth.ini", "clips = 3\nclip-len = 6\ngrid = 8\nseed = 9\n");
  ASSERT_EQ(run("--config synth.ini synth --out cfg_a").code, 0);
  const std::string a = file("cfg_a/effective_config.txt");
  EXPECT_NE(a.find("clips=3"), std::string::npos);
  EXPECT_NE(a.find("seed=9"), std::string::npos);
  const std::string manifest = file("cfg_a/clips.txt");
  EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 4);

  ASSERT_EQ(run("--config synth.ini synth --clips 2 --out cfg_b").code, 0);
  const std::string b = file("cfg_b/effective_config.txt");
  EXPECT_NE(b.find("clips=2"), std::string::npos);
  EXPECT_NE(b.find("seed=9"), std::string::npos);
}

TEST_F(Cli, MineReportsCounts) {
  EXPECT_TRUE(exists("mined/tuples.txt"));
  const auto j = nlohmann::json::parse(file("mined/mining.json"));
  EXPECT_TRUE(j.is_object());
  EXPECT_NE(file("mined/effective_config.txt").find("T=2"), std::string::npos);
}

TEST_F(Cli, TrainWritesArtifacts) {
  for (const char* f : {"checkpoint.bin", "history.csv", "summary.json", "effective_config.txt"}) {
    EXPECT_TRUE(exists(std::string("model/") + f)) << f;
  }
  const std::string hist = file("model/history.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 6);
}

TEST_F(Cli, UnregNeedsNoTuples) {
  EXPECT_EQ(run("train --labeled data/labeled.txt --method unreg --hidden 4 --features 3 --epochs 2 --out unreg").code,
            0);
  EXPECT_EQ(run("train --labeled data/labeled.txt --method ssfa --hidden 4 --features 3 --epochs 2 --out bad").code, 2);
}

TEST_F(Cli, EvaluationsWriteReports) {
  ASSERT_EQ(run("eval-cls --checkpoint model/checkpoint.bin --test held/labeled.txt --out cls").code, 0);
  auto j = nlohmann::json::parse(file("cls/report.json"));
  EXPECT_GE(j["accuracy"].get<double>(), 0.0);
  EXPECT_LE(j["accuracy"].get<double>(), 1.0);

  ASSERT_EQ(run("eval-knn --checkpoint model/checkpoint.bin --train data/labeled.txt --test held/labeled.txt --k 3 "
                "--out knn")
                .code,
            0);
  j = nlohmann::json::parse(file("knn/report.json"));
  EXPECT_GE(j["accuracy"].get<double>(), 0.0);

  ASSERT_EQ(run("eval-seqcomp --checkpoint model/checkpoint.bin --clips held/clips.txt --T 2 --queries 20 --out seq")
                .code,
            0);
  j = nlohmann::json::parse(file("seq/report.json"));
  EXPECT_EQ(j["ranks"].size(), 20u);
  EXPECT_GT(j["eta"].get<double>(), 0.0);
  EXPECT_TRUE(exists("seq/ranks.csv"));
}

TEST_F(Cli, ClassCountMismatchFails) {
  ASSERT_EQ(run("synth --grid 8 --clips 1 --shapes 2 --per-class 2 --out two").code, 0);
  EXPECT_EQ(run("eval-cls --checkpoint model/checkpoint.bin --test two/labeled.txt --out mismatch").code, 3);
}

TEST_F(Cli, GradcheckPassesAndDetectsFlip) {
  auto r = run("gradcheck --points 10 --out grad");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_TRUE(exists("grad/report.json"));
  r = run("gradcheck --points 3 --flip-sign");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, RepeatRunsAreByteIdentical) {
  ASSERT_EQ(run("train --labeled data/labeled.txt --clips data/clips.txt --tuples mined/tuples.txt --hidden 6 "
                "--features 5 --epochs 5 --seed 2 --out model_again")
                .code,
            0);
  for (const char* f : {"checkpoint.bin", "history.csv", "summary.json"}) {
    EXPECT_EQ(file(std::string("model/") + f), file(std::string("model_again/") + f)) << f;
  }
}
