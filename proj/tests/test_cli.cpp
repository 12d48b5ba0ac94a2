#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "hcv/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(HCV_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("hcv_cli_test_" + std::to_string(::getpid()) + "_" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir / name) << text; }

  fs::path dir;
};

double value_of(const std::string& out, const std::string& key) {
  const auto pos = out.find(key + " ");
  if (pos == std::string::npos) return std::nan("");
  return std::stod(out.substr(pos + key.size() + 1));
}

}  // namespace

TEST_F(Cli, HsicDetectsCopiedColumnDeterministically) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::string csv = "a,b\n";
  for (int i = 0; i < 50; ++i) {
    const double x = nd(rng);
    csv += hcv::io::format_number(x, 17) + "," + hcv::io::format_number(x, 17) + "\n";
  }
  write("dup.csv", csv);
  const auto r = run("hsic " + path("dup.csv") + " --u a --v b --permutations 199 --seed 4");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_GT(value_of(r.out, "hsic"), 0.0);
  EXPECT_LE(value_of(r.out, "p_value"), 0.01);
  EXPECT_EQ(run("hsic " + path("dup.csv") + " --u a --v b --permutations 199 --seed 4").out, r.out);
}

TEST_F(Cli, ConstantColumn) {
  write("c.csv", "a,b\n1,0.5\n1,2\n1,3\n1,-1\n");
  const auto fixed = run("hsic " + path("c.csv") + " --u a --v b --gamma-u 1");
  ASSERT_EQ(fixed.code, 0) << fixed.out;
  EXPECT_EQ(value_of(fixed.out, "hsic"), 0.0);
  const auto median = run("hsic " + path("c.csv") + " --u a --v b");
  EXPECT_EQ(median.code, 4);
  EXPECT_NE(median.out.find("median_heuristic: degenerate bandwidth"), std::string::npos) << median.out;
}

TEST_F(Cli, MalformedCsv) {
  write("bad.csv", "a,b\n1,2\n3,zz\n");
  const auto r = run("hsic " + path("bad.csv") + " --u a --v b");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("line 3, column 2"), std::string::npos) << r.out;
}

TEST_F(Cli, DhsicTwoGroupsEqualsHsicAndTheoremTwo) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  std::string csv = "x,y,z,label\n";
  for (int i = 0; i < 40; ++i) {
    csv += std::to_string(nd(rng)) + "," + std::to_string(nd(rng)) + "," + std::to_string(nd(rng)) + "," +
           std::to_string(i % 3) + "\n";
  }
  write("d.csv", csv);
  const auto h = run("hsic " + path("d.csv") + " --u x,y --v z");
  const auto d = run("dhsic " + path("d.csv") + " --group x,y --group z");
  ASSERT_EQ(h.code, 0) << h.out;
  ASSERT_EQ(d.code, 0) << d.out;
  EXPECT_EQ(h.out.substr(5), d.out.substr(6));
  const auto delta = run("hsic " + path("d.csv") + " --u x,y --v label --kernel-v delta");
  const auto mmd = run("mmd " + path("d.csv") + " --columns x,y --label label --weighted");
  ASSERT_EQ(mmd.code, 0) << mmd.out;
  EXPECT_NEAR(value_of(delta.out, "hsic"), value_of(mmd.out, "weighted_mmd_sum"), 1e-10);
}

TEST_F(Cli, MmdSplitHalfOfDuplicatedRows) {
  write("h.csv", "a,b\n1,2\n3,5\n-1,0\n1,2\n3,5\n-1,0\n");
  const auto r = run("mmd " + path("h.csv") + " --columns a,b --split-half");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(value_of(r.out, "mmd"), 0.0);
}

TEST_F(Cli, LingaussGenLoglikPosterior) {
  const std::string gen = "lingauss gen --dims 2,2,2,5 --rows 100 --seed 7 ";
  ASSERT_EQ(run(gen + "--out " + path("a.csv") + " --model-out " + path("a.json")).code, 0);
  ASSERT_EQ(run(gen + "--out " + path("b.csv") + " --model-out " + path("b.json")).code, 0);
  EXPECT_EQ(hcv::io::read_file(path("a.csv")), hcv::io::read_file(path("b.csv")));
  const auto ll = run("lingauss loglik --model " + path("a.json") + " --data " + path("a.csv"));
  ASSERT_EQ(ll.code, 0) << ll.out;
  EXPECT_TRUE(std::isfinite(value_of(ll.out, "loglik")));

  ASSERT_EQ(run("lingauss gen --dims 1,1,1,2 --rows 3 --zero A,B,C --out " + path("z.csv") + " --model-out " +
                path("z.json"))
                .code,
            0);
  write("zero.csv", "x_0,x_1\n0,0\n");
  const auto z = run("lingauss loglik --model " + path("z.json") + " --data " + path("zero.csv"));
  EXPECT_NE(z.out.find("loglik -1.83787706641"), std::string::npos) << z.out;
  const auto post = run("lingauss posterior --model " + path("z.json"));
  EXPECT_NE(post.out.find("covariance 2 2\n1 0\n0 1\n"), std::string::npos) << post.out;

  const auto mismatch = run("lingauss loglik --model " + path("z.json") + " --data " + path("a.csv"));
  EXPECT_EQ(mismatch.code, 3);
}

TEST_F(Cli, TrainRerunGapAndErrors) {
  const std::string flags = "--epochs 1 --n-train 256 --n-test 64 --dims 2,2,2,5 --batch-size 32 ";
  const auto a = run("train " + flags + "--out-dir " + path("t1"));
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("final step"), std::string::npos);
  for (const char* f : {"trace.csv", "timings.csv", "checkpoint.json", "manifest.json", "model.json"}) {
    EXPECT_TRUE(fs::exists(dir / "t1" / f)) << f;
  }
  const auto lam0 = run("train " + flags + "--objective hcv --lambda 0 --out-dir " + path("t0"));
  ASSERT_EQ(lam0.code, 0) << lam0.out;
  EXPECT_EQ(hcv::io::read_file(path("t1/trace.csv")), hcv::io::read_file(path("t0/trace.csv")));

  ASSERT_EQ(run("rerun " + path("t1/manifest.json") + " --out-dir " + path("t2")).code, 0);
  EXPECT_EQ(hcv::io::read_file(path("t1/trace.csv")), hcv::io::read_file(path("t2/trace.csv")));

  ASSERT_EQ(run("lingauss gen --dims 2,2,2,5 --rows 50 --seed 3 --out " + path("g.csv") + " --model-out " +
                path("g.json"))
                .code,
            0);
  const auto gap = run("lingauss gap --model " + path("t1/model.json") + " --data " + path("g.csv") + " --checkpoint " +
                       path("t1/checkpoint.json"));
  ASSERT_EQ(gap.code, 0) << gap.out;
  EXPECT_NEAR(value_of(gap.out, "total_gap"), value_of(gap.out, "marginal_kl_sum") + value_of(gap.out, "coupling_term"),
              1e-9);

  const auto bad = run("train --objective hcv --batch-size 8 --out-dir " + path("t3"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("batch_size"), std::string::npos) << bad.out;
  write("cfg.json", "{\"epochs\": 1, \"nonsense\": 3}");
  const auto unknown = run("train --config " + path("cfg.json") + " --out-dir " + path("t4"));
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("nonsense"), std::string::npos) << unknown.out;
  EXPECT_EQ(run("no-such-command").code, 2);
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  write("cfg.json", "{\"epochs\": 1, \"n_train\": 256, \"n_test\": 64, \"batch_size\": 32, "
                    "\"dims\": {\"latent_v\": 1, \"latent_u\": 1, \"noise_rank\": 1, \"observed\": 3}}");
  const auto r = run("train --config " + path("cfg.json") + " --seed 5 --out-dir " + path("o"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto manifest = hcv::io::read_json(path("o/manifest.json"));
  EXPECT_EQ(manifest.at("config").at("seed").get<int>(), 5);
  EXPECT_EQ(manifest.at("config").at("epochs").get<int>(), 1);
  EXPECT_EQ(manifest.at("inputs").size(), 1u);
}

TEST_F(Cli, SweepOutputsAndRerun) {
  const auto r = run("sweep --grid vae,hcv:5 --seeds 0,1 --epochs 1 --n-train 256 --n-test 64 --batch-size 32 "
                     "--dims 1,1,1,3 --out-dir " + path("s1"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto summary = hcv::io::read_csv(path("s1/sweep_summary.csv"));
  ASSERT_EQ(summary.rows.size(), 2u);
  EXPECT_EQ(summary.rows[1][0], "hcv");
  EXPECT_EQ(summary.rows[1][2], "2");
  ASSERT_EQ(run("rerun " + path("s1/manifest.json") + " --out-dir " + path("s2")).code, 0);
  for (const auto& e : fs::directory_iterator(dir / "s1" / "traces")) {
    EXPECT_EQ(hcv::io::read_file(e.path()), hcv::io::read_file(dir / "s2" / "traces" / e.path().filename()));
  }
}
