#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

#include "dsrd/network.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(DSRD_CLI_PATH) + " " + args + " 2>/dev/null";
  Outcome r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("dsrd_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string at(const std::string& name) const { return (dir / name).string(); }

  // small periodic stream plus a one-epoch model
  void small_run() {
    ASSERT_EQ(run("synth --pattern periodic --nodes 20 --events 300 --pairs 10 --node-feat-dim 4 --out " + at("data")).code, 0);
    std::ofstream(at("tiny.cfg")) << "dim = 8\nlayers = 1\nheads = 2\nneighbors = 4\ntime_dim = 4\nbatch_size = 50\n";
    ASSERT_EQ(run("train --data " + at("data") + " --config " + at("tiny.cfg") + " --max-epochs 1 --out " + at("run")).code, 0);
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, UsageAndRuntimeExitCodes) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("synth").code, 2);
  EXPECT_EQ(run("synth --pattern spiral --out " + at("x")).code, 2);
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("train --data " + at("missing") + " --out " + at("r")).code, 1);
}

TEST_F(Cli, ChainFixture) {
  ASSERT_EQ(run("synth --pattern chain --out " + at("c")).code, 0);
  const auto s = dsrd::ingest_csv(at("c/events.csv"));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].src, 0u);
  EXPECT_EQ(s[1].dst, 2u);
  EXPECT_TRUE(fs::exists(at("c/manifest.json")));
}

TEST_F(Cli, SynthIsByteIdentical) {
  ASSERT_EQ(run("synth --events 500 --nodes 30 --seed 4 --out " + at("a")).code, 0);
  ASSERT_EQ(run("synth --events 500 --nodes 30 --seed 4 --out " + at("b")).code, 0);
  EXPECT_EQ(slurp(at("a/events.csv")), slurp(at("b/events.csv")));
  EXPECT_EQ(slurp(at("a/node_features.csv")), slurp(at("b/node_features.csv")));
  const auto m = nlohmann::json::parse(slurp(at("a/manifest.json")));
  EXPECT_EQ(m["inputs"].size(), 2u);
}

TEST_F(Cli, TrainZeroEpochsAndEvalDeterminism) {
  ASSERT_EQ(run("synth --pattern periodic --nodes 20 --events 300 --pairs 10 --node-feat-dim 4 --out " + at("data")).code, 0);
  std::ofstream(at("tiny.cfg")) << "dim = 8\nlayers = 1\nneighbors = 4\ntime_dim = 4\nbatch_size = 50\n";
  ASSERT_EQ(run("train --data " + at("data") + " --config " + at("tiny.cfg") + " --max-epochs 0 --out " + at("r")).code, 0);
  EXPECT_TRUE(fs::exists(at("r/model.ckpt")));
  EXPECT_TRUE(slurp(at("r/history.jsonl")).empty());
  const std::string eval = "eval --checkpoint " + at("r/model.ckpt") + " --data " + at("data") + " --seed 3";
  const Outcome a = run(eval), b = run(eval);
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  const auto j = nlohmann::json::parse(a.out);
  for (const char* k : {"ap", "roc_auc", "setting", "strategy", "seed", "config_hash"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["strategy"], "random");
  EXPECT_EQ(run(eval + " --nss never").code, 2);
  const auto h = nlohmann::json::parse(run(eval + " --nss hist").out);
  EXPECT_EQ(h["strategy"], "historical");
}

TEST_F(Cli, TrainWritesHistoryAndAppliesEveryAblation) {
  small_run();
  std::istringstream hist(slurp(at("run/history.jsonl")));
  std::string line;
  ASSERT_TRUE(std::getline(hist, line));
  EXPECT_TRUE(nlohmann::json::parse(line).contains("val_ap"));
  ASSERT_EQ(run("train --data " + at("data") + " --config " + at("tiny.cfg") +
                " --max-epochs 0 --no-decay --no-diffusion --no-state --no-block --out " + at("abl"))
                .code,
            0);
  std::ifstream ck(at("abl/model.ckpt"), std::ios::binary);
  const auto m = dsrd::read_checkpoint<float>(ck);
  const auto& a = m.config().ablation;
  EXPECT_TRUE(a.no_decay && a.no_diffusion && a.no_state && a.no_block);
}

TEST_F(Cli, ExportDecays) {
  const Outcome r = run("export-decays --layers 1 --heads 2 --steps 5 --grid 10 --max-dt 20");
  ASSERT_EQ(r.code, 0);
  const auto rows = csv_rows(r.out);
  ASSERT_GT(rows.size(), 1u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"layer", "head", "gamma", "lambda", "alpha", "delta", "curve", "hop", "x", "value"}));
  std::map<std::string, std::vector<double>> curves;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& c = rows[i];
    ASSERT_EQ(c.size(), 10u);
    EXPECT_DOUBLE_EQ(std::stod(c[2]), 0.5);
    const double x = std::stod(c[8]), v = std::stod(c[9]);
    if (x == 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0) << c[6];
    }
    curves[c[0] + c[1] + c[6] + c[7]].push_back(v);
  }
  for (const auto& [k, v] : curves)
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_LE(v[i], v[i - 1]) << k;
  small_run();
  EXPECT_EQ(run("export-decays --checkpoint " + at("run/model.ckpt") + " --out " + at("d.csv")).code, 0);
  EXPECT_FALSE(slurp(at("d.csv")).empty());
}

TEST_F(Cli, BenchCsv) {
  const Outcome r = run("bench --sizes 100,200 --repeats 1 --nodes 20 --dim 8 --neighbors 3");
  ASSERT_EQ(r.code, 0);
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"events", "nodes", "forward_ms", "backward_ms"}));
  EXPECT_EQ(rows[2][0], "200");
  EXPECT_EQ(run("bench --sizes 1.5").code, 2);
}

TEST_F(Cli, GradCheckPasses) {
  const Outcome r = run("gradcheck --seed 1 --events 12 --per-param 2");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_LE(nlohmann::json::parse(r.out)["max_rel_error"].get<double>(), 1e-4);
}
