#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <sstream>
#include <string>

#include "json.hpp"
#include "trajdiv/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Every test shares one scratch directory with a tiny dataset and models.
class Cli : public ::testing::Test {
 protected:
  static fs::path dir() { return fs::temp_directory_path() / "trajdiv_cli_test"; }

  static Result run(const std::string& args) {
    const fs::path out = dir() / "stdout.txt", err = dir() / "stderr.txt";
    const std::string cmd = "cd '" + dir().string() + "' && '" + TRAJDIV_CLI_PATH + "' " + args + " >'" +
                            out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static void SetUpTestSuite() {
    fs::remove_all(dir());
    fs::create_directories(dir());
    std::ofstream(dir() / "cfg.json") << R"({
  "schema_version": 1,
  "seed": 3,
  "model": {"grid_size": 32, "d_h": 8, "d_m": 8, "d_z": 4, "n_samples": 5,
            "posterior_hidden": 16, "decoder_fc": 16, "dsf_width": 16},
  "cvae": {"epochs": 2, "batch_size": 8},
  "dsf": {"epochs": 2, "batch_size": 8, "learning_rate": 0.001},
  "dataset": "data",
  "cvae_checkpoint": "cvae.ckpt",
  "dsf_checkpoint": "dsf.ckpt",
  "threads": 1
})";
    ASSERT_EQ(run("gen-scenes --config cfg.json --n-scenes 16 --n-val 6 --quiet").code, 0);
    ASSERT_EQ(run("train-cvae --config cfg.json --quiet").code, 0);
    ASSERT_EQ(run("train-dsf --config cfg.json --quiet").code, 0);
    const nlohmann::json index = nlohmann::json::parse(slurp(dir() / "data" / "index.json"));
    for (const auto& r : index["records"]) {
      if (r["split"] == "val" && r["kind"] == "t-intersection" && t_scene_.empty()) t_scene_ = r["id"];
      if (r["split"] == "val" && scene_.empty()) scene_ = r["id"];
    }
    if (t_scene_.empty()) t_scene_ = scene_;
  }
  static void TearDownTestSuite() { fs::remove_all(dir()); }

  static std::string scene_;
  static std::string t_scene_;
};
std::string Cli::scene_;
std::string Cli::t_scene_;

}  // namespace

TEST_F(Cli, HelpListsFlagsWithDefaults) {
  const Result top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* cmd : {"gen-scenes", "train-cvae", "train-dsf", "eval", "ablate", "sweep-lambda", "plot-scene",
                          "dump-kernel"}) {
    EXPECT_NE(top.out.find(cmd), std::string::npos) << cmd;
    const Result sub = run(std::string(cmd) + " --help");
    EXPECT_EQ(sub.code, 0) << cmd;
    EXPECT_NE(sub.out.find("--seed"), std::string::npos) << cmd;
    EXPECT_NE(sub.out.find("--config"), std::string::npos) << cmd;
  }
  const Result gen = run("gen-scenes --help");
  EXPECT_TRUE(std::regex_search(gen.out, std::regex(R"(--n-scenes[^\n]*2000)"))) << gen.out;
  EXPECT_TRUE(std::regex_search(gen.out, std::regex(R"(--seed[^\n]*1)"))) << gen.out;
  EXPECT_TRUE(std::regex_search(run("train-dsf --help").out, std::regex(R"(--lambda[^\n]*0\.5)")));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("fly").code, 2);
  EXPECT_EQ(run("gen-scenes --bogus").code, 2);
  EXPECT_EQ(run("train-dsf --config cfg.json --lambda 2").code, 2);
  EXPECT_EQ(run("eval --config cfg.json --sampler beam").code, 2);
  EXPECT_EQ(run("gen-scenes --out x --layout-mix 1,2").code, 2);
  EXPECT_EQ(run("eval --config missing.json").code, 2);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  const Result r = run("plot-scene --config cfg.json --scene nosuchscene --out p.svg");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nosuchscene"), std::string::npos);
  EXPECT_EQ(run("eval --config cfg.json --cvae none.ckpt --out-json x.json --out-csv x.csv").code, 1);
}

TEST_F(Cli, DivergenceExitsThreeAndKeepsCheckpoint) {
  const Result r = run("train-cvae --config cfg.json --lr 1e300 --out diverged.ckpt --quiet");
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_TRUE(fs::exists(dir() / "diverged.ckpt"));
}

TEST_F(Cli, EvalWritesReports) {
  ASSERT_EQ(run("eval --config cfg.json --sampler dsf --out-json ev/r.json --out-csv ev/r.csv").code, 0);
  const nlohmann::json j = nlohmann::json::parse(slurp(dir() / "ev" / "r.json"));
  EXPECT_EQ(j["sampler"], "dsf");
  EXPECT_EQ(j["split"], "val");
  EXPECT_EQ(j["scene_count"], 6);
  EXPECT_EQ(j["n_samples"], 5);
  const std::string csv = slurp(dir() / "ev" / "r.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST_F(Cli, PlotSceneIsWellFormedWithOneRedLinePerSample) {
  ASSERT_EQ(run("plot-scene --config cfg.json --scene " + scene_ + " --sampler dsf --out plot.svg").code, 0);
  const std::string svg = slurp(dir() / "plot.svg");
  EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  std::size_t red = 0;
  for (std::size_t p = svg.find("stroke=\"red\""); p != std::string::npos; p = svg.find("stroke=\"red\"", p + 1)) ++red;
  EXPECT_EQ(red, 5u);
  // Balanced tags: every element here is self-closing or explicitly closed.
  std::size_t open = 0, close = 0;
  for (std::size_t p = svg.find('<'); p != std::string::npos; p = svg.find('<', p + 1)) {
    const std::size_t end = svg.find('>', p);
    ASSERT_NE(end, std::string::npos);
    const std::string tag = svg.substr(p, end - p + 1);
    if (tag[1] == '?' || tag[end - p - 1] == '/') continue;
    (tag[1] == '/' ? close : open) += 1;
  }
  EXPECT_EQ(open, close);
  // Predicted vertices lie in the viewport.
  const std::regex pts(R"re(stroke="red"[^>]*points="([^"]*)")re");
  const double size = 32 * 8;
  std::size_t vertices = 0;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), pts); it != std::sregex_iterator(); ++it) {
    std::istringstream in((*it)[1].str());
    std::string pair;
    while (in >> pair) {
      const double x = std::stod(pair.substr(0, pair.find(','))), y = std::stod(pair.substr(pair.find(',') + 1));
      EXPECT_GE(x, 0.0);
      EXPECT_GE(y, 0.0);
      EXPECT_LE(x, size);
      EXPECT_LE(y, size);
      ++vertices;
    }
  }
  EXPECT_EQ(vertices, 5u * 7u);
}

TEST_F(Cli, DumpKernelWritesKernelEntries) {
  const Result r = run("dump-kernel --config cfg.json --scene " + t_scene_ + " --sampler prior --out k.ckpt");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto entries = trajdiv::checkpoint::read_entries(dir() / "k.ckpt");
  ASSERT_EQ(entries.size(), 4u);
  EXPECT_EQ(entries[0].first, "kernel");
  EXPECT_EQ(entries[0].second.shape(), (trajdiv::Shape{5, 5}));
  EXPECT_NE(r.out.find("expected cardinality"), std::string::npos);
}

TEST_F(Cli, EveryCommandIsByteReproducible) {
  const std::vector<std::pair<std::string, std::vector<std::string>>> cases = {
      {"gen-scenes --config cfg.json --n-scenes 10 --n-val 3 --out rep/data --quiet",
       {"rep/data/index.json", "rep/data/rasters.bin"}},
      {"train-cvae --config cfg.json --out rep/c.ckpt --log rep/c.csv --quiet",
       {"rep/c.ckpt", "rep/c.ckpt.json", "rep/c.csv"}},
      {"train-dsf --config cfg.json --out rep/d.ckpt --log rep/d.csv --quiet",
       {"rep/d.ckpt", "rep/d.ckpt.json", "rep/d.csv"}},
      {"eval --config cfg.json --sampler prior --out-json rep/e.json --out-csv rep/e.csv", {"rep/e.json", "rep/e.csv"}},
      {"ablate --config cfg.json --out rep/ab --quiet", {"rep/ab/ablation.json", "rep/ab/ablation.txt"}},
      {"sweep-lambda --config cfg.json --lambdas 0,1 --out rep/sw --quiet", {"rep/sw/sweep.csv", "rep/sw/sweep.svg"}},
      {"plot-scene --config cfg.json --scene " + scene_ + " --out rep/p.svg", {"rep/p.svg"}},
      {"dump-kernel --config cfg.json --scene " + scene_ + " --out rep/k.ckpt", {"rep/k.ckpt"}},
  };
  for (const auto& [cmd, files] : cases) {
    ASSERT_EQ(run(cmd).code, 0) << cmd;
    std::vector<std::string> first;
    for (const auto& f : files) first.push_back(slurp(dir() / f));
    for (const auto& f : files) fs::remove(dir() / f);
    ASSERT_EQ(run(cmd).code, 0) << cmd;
    for (std::size_t i = 0; i < files.size(); ++i) {
      EXPECT_FALSE(first[i].empty()) << files[i];
      EXPECT_EQ(slurp(dir() / files[i]), first[i]) << files[i];
    }
  }
}

TEST_F(Cli, SeedFlagOverridesConfig) {
  ASSERT_EQ(run("gen-scenes --config cfg.json --n-scenes 4 --n-val 0 --out s1 --quiet").code, 0);
  ASSERT_EQ(run("gen-scenes --config cfg.json --n-scenes 4 --n-val 0 --out s2 --seed 4 --quiet").code, 0);
  EXPECT_NE(slurp(dir() / "s1" / "index.json"), slurp(dir() / "s2" / "index.json"));
  const nlohmann::json j = nlohmann::json::parse(slurp(dir() / "s2" / "index.json"));
  EXPECT_EQ(j["master_seed"], 4);
}

TEST_F(Cli, ConfigFromEnvironment) {
  const Result r = run("gen-scenes --n-scenes 3 --n-val 0 --out env --quiet");
  ASSERT_EQ(r.code, 0);
  ASSERT_EQ(setenv("TRAJDIV_CONFIG", (dir() / "cfg.json").c_str(), 1), 0);
  const Result e = run("gen-scenes --n-scenes 3 --n-val 0 --out env2 --quiet");
  unsetenv("TRAJDIV_CONFIG");
  ASSERT_EQ(e.code, 0);
  // The config sets grid 32 and seed 3; the defaults are 64 and 1.
  EXPECT_EQ(nlohmann::json::parse(slurp(dir() / "env" / "index.json"))["grid_size"], 64);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir() / "env2" / "index.json"))["grid_size"], 32);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir() / "env2" / "index.json"))["master_seed"], 3);
}

TEST_F(Cli, GridMismatchRejected) {
  ASSERT_EQ(run("gen-scenes --n-scenes 3 --n-val 1 --grid-size 48 --out g48 --quiet").code, 0);
  EXPECT_EQ(run("eval --config cfg.json --dataset g48 --out-json g.json --out-csv g.csv").code, 2);
}
