#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dimekit/extxyz.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = DIMEKIT_CLI_PATH;
const fs::path kData = DIMEKIT_TEST_DATA;

struct Outcome {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dimekit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args, const std::string& env = "") const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = env + " '" + kCli + "' " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  // small corpus and a tiny model, enough to exercise every subcommand quickly
  static std::string tiny() {
    return "--set data.train=30 --set data.val=10 --set data.test=10 --set toy.duration_fs=30 --set toy.snapshots_per_trajectory=2 "
           "--set model.hidden_dim=8 --set model.out_emb_dim=8 --set model.triplet_dim=4 --set model.num_blocks=1 "
           "--set train.max_steps=6 --set train.batch_size=4 --set train.warmup_steps=2 --set train.eval_interval=3";
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UnknownFlagExitsOneWithUsage) {
  const Outcome r = run("gen-toy --no-such-flag");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE((r.out + r.err).find("Usage"), std::string::npos);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, InputErrorsExitOne) {
  EXPECT_EQ(run("gen-toy --set no.such.key=1 --out " + p("x")).code, 1);
  EXPECT_EQ(run("gen-toy --set model.hidden_dim=oops --out " + p("x")).code, 1);
  EXPECT_EQ(run("eval --checkpoint /nonexistent --data /nonexistent").code, 1);
  EXPECT_EQ(run("bench", "DIMEKIT_LOG=loud").code, 1);
  std::ofstream(p("bad.json")) << "{\"model\": {\"hidden\": 3}}";
  const Outcome r = run("gen-toy --config " + p("bad.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("model/hidden"), std::string::npos);
  std::ofstream(p("bad.xyz")) << "1\nenergy=1\nXx 0 0 0\n";
  const Outcome s = run("stats --data " + p("bad.xyz") + " --out " + p("s"));
  EXPECT_EQ(s.code, 1);
  EXPECT_NE(s.err.find("line 3"), std::string::npos);
}

TEST_F(Cli, GenTrainPredictRoundTrip) {
  ASSERT_EQ(run("gen-toy " + tiny() + " --seed 3 --out " + p("data")).code, 0);
  const auto test = dimekit::read_extxyz_file(p("data/test.xyz"));
  ASSERT_EQ(test.size(), 10u);
  const std::string manifest = slurp(p("data/manifest.json"));
  EXPECT_NE(manifest.find("\"reference_energies\""), std::string::npos);

  ASSERT_EQ(run("train " + tiny() + " --train " + p("data/train.xyz") + " --val " + p("data/val.xyz") + " --out " +
                p("model"))
                .code,
            0);
  EXPECT_TRUE(fs::exists(p("model/model.ckpt")));
  EXPECT_EQ(first_line(p("model/train_log.csv")), "step,lr,train_loss,val_mae_E,val_mae_F");

  ASSERT_EQ(run("predict --checkpoint " + p("model/model.ckpt") + " --data " + p("data/test.xyz") + " --out " +
                p("pred"))
                .code,
            0);
  const auto pred = dimekit::read_extxyz_file(p("pred/predictions.xyz"));
  ASSERT_EQ(pred.size(), test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(pred[i].atomic_numbers, test[i].atomic_numbers);
    EXPECT_TRUE(pred[i].energy.has_value());
    EXPECT_TRUE(pred[i].forces.has_value());
  }
  std::istringstream csv(slurp(p("pred/predictions.csv")));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 10);

  ASSERT_EQ(run("eval --checkpoint " + p("model/model.ckpt") + " --data " + p("data/test.xyz") + " --out " +
                p("eval"))
                .code,
            0);
  EXPECT_EQ(first_line(p("eval/eval.csv")), "metric,value,n_samples");

  ASSERT_EQ(run("stats --data " + p("data/train.xyz") + " --manifest " + p("data/manifest.json") +
                " --set stats.bins=5 --out " + p("stats"))
                .code,
            0);
  std::istringstream hist(slurp(p("stats/stats.csv")));
  std::getline(hist, line);
  EXPECT_EQ(line, "bin_lower,bin_upper,count");
  int total = 0;
  while (std::getline(hist, line)) total += std::stoi(line.substr(line.rfind(',') + 1));
  EXPECT_EQ(total, 30);
}

TEST_F(Cli, EnsembleAndCalibrate) {
  ASSERT_EQ(run("gen-toy " + tiny() + " --out " + p("data")).code, 0);
  ASSERT_EQ(run("ensemble-train " + tiny() + " --set ensemble.k=2 --train " + p("data/train.xyz") + " --val " +
                p("data/val.xyz") + " --out " + p("ens"))
                .code,
            0);
  EXPECT_TRUE(fs::exists(p("ens/member_1.ckpt")));
  const Outcome r = run("calibrate --ensemble " + p("ens/ensemble.json") + " --data " + p("data/test.xyz") +
                    " --set calibrate.cov_samples=3 --out " + p("cal"));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string report = slurp(p("cal/calibration.csv"));
  EXPECT_EQ(report.substr(0, 23), "metric,value,n_samples\n");
  EXPECT_NE(report.find("rho_forces,"), std::string::npos);
  EXPECT_NE(report.find("cov_identity_relative,"), std::string::npos);
  EXPECT_EQ(first_line(p("cal/calibration_samples.csv")), "sample_id,delta_E,sigma_E");

  // a checkpoint without the mean-variance head cannot be calibrated on its own
  EXPECT_EQ(run("calibrate --checkpoint " + p("ens/member_0.ckpt") + " --data " + p("data/test.xyz")).code, 1);

  ASSERT_EQ(run("train " + tiny() + " --set model.mve_head=true --set train.loss=nll --train " +
                p("data/train.xyz") + " --val " + p("data/val.xyz") + " --out " + p("mve"))
                .code,
            0);
  ASSERT_EQ(run("calibrate --checkpoint " + p("mve/model.ckpt") + " --data " + p("data/test.xyz") + " --out " +
                p("calm"))
                .code,
            0);
  EXPECT_NE(slurp(p("calm/calibration.csv")).find("rho_forces,absent,0"), std::string::npos);
}

TEST_F(Cli, SameSeedSameBytes) {
  for (const char* tag : {"a", "b"}) {
    const std::string d = p(tag);
    ASSERT_EQ(run("gen-toy " + tiny() + " --seed 9 --threads 1 --out " + d).code, 0);
    ASSERT_EQ(run("train " + tiny() + " --seed 9 --threads 1 --train " + d + "/train.xyz --val " + d +
                  "/val.xyz --out " + d)
                  .code,
              0);
    ASSERT_EQ(run("eval --checkpoint " + d + "/model.ckpt --data " + d + "/test.xyz --out " + d).code, 0);
  }
  for (const char* f : {"train.xyz", "model.ckpt", "train_log.csv", "eval.csv"})
    EXPECT_EQ(slurp(p("a") + "/" + f), slurp(p("b") + "/" + f)) << f;
  ASSERT_EQ(run("gen-toy " + tiny() + " --seed 10 --out " + p("c")).code, 0);
  EXPECT_NE(slurp(p("a/train.xyz")), slurp(p("c/train.xyz")));
}

TEST_F(Cli, BenchWritesTable) {
  const Outcome r = run("bench --set bench.triplets=2000 --set bench.repeats=1 --out " + p("bench"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("bilinear / hadamard"), std::string::npos);
  EXPECT_EQ(first_line(p("bench/bench.csv")), "variant,triplets,seconds,ns_per_triplet,macs_per_triplet");
}

// eval.csv schema and values against a checked-in checkpoint and dataset
TEST_F(Cli, EvalMatchesGoldenFile) {
  ASSERT_EQ(run("eval --checkpoint " + (kData / "golden_model.ckpt").string() + " --data " +
                (kData / "golden.xyz").string() + " --out " + p("eval"))
                .code,
            0);
  std::istringstream got(slurp(p("eval/eval.csv"))), want(slurp(kData / "golden_eval.csv"));
  std::string g, w;
  int lines = 0;
  while (std::getline(want, w)) {
    ASSERT_TRUE(std::getline(got, g));
    ++lines;
    if (lines == 1) {
      EXPECT_EQ(g, w);
      continue;
    }
    // metric name and sample count exactly; value to 1e-9 relative
    const auto gc = g.find(','), wc = w.find(',');
    EXPECT_EQ(g.substr(0, gc), w.substr(0, wc));
    EXPECT_EQ(g.substr(g.rfind(',')), w.substr(w.rfind(',')));
    const double gv = std::stod(g.substr(gc + 1)), wv = std::stod(w.substr(wc + 1));
    EXPECT_NEAR(gv, wv, 1e-9 * std::max(1.0, std::abs(wv))) << w;
  }
  EXPECT_FALSE(std::getline(got, g));
  EXPECT_EQ(lines, 5);
}
