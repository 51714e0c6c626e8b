#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const char* kTool = FNN_TOOL_PATH;

std::string fresh_dir(const std::string& name) {
  fs::path p = fs::path("cli_test_out") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string write_config(const std::string& dir, const std::string& name, const json& j) {
  std::string path = dir + "/" + name;
  std::ofstream out(path);
  out << j.dump(1) << "\n";
  return path;
}

int run_tool(const std::string& args) {
  std::string cmd = std::string(kTool) + " " + args + " > /dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  EXPECT_NE(rc, -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

json tiny_train_config() {
  return json{{"kind", "spiral-train"}, {"seed", 3},       {"steps", 120},
              {"iterations", 25},       {"hidden", {8.0}}, {"ts", 0.01}};
}

TEST(Cli, RunsTinyTrainingConfig) {
  std::string dir = fresh_dir("ok");
  std::string cfg = write_config(dir, "cfg.json", tiny_train_config());
  int rc = run_tool("train-node --config " + cfg + " --out " + dir + "/out");
  EXPECT_EQ(rc, 0);
  EXPECT_TRUE(fs::exists(dir + "/out/report.json"));
  EXPECT_TRUE(fs::exists(dir + "/out/manifest.json"));
  std::ifstream in(dir + "/out/manifest.json");
  json manifest = json::parse(in);
  EXPECT_EQ(manifest.at("seed").get<std::uint64_t>(), 3u);
}

TEST(Cli, SeedFlagOverridesConfig) {
  std::string dir = fresh_dir("seed");
  std::string cfg = write_config(dir, "cfg.json", tiny_train_config());
  int rc = run_tool("train-node --config " + cfg + " --seed 5 --out " + dir + "/out");
  EXPECT_EQ(rc, 0);
  std::ifstream in(dir + "/out/manifest.json");
  json manifest = json::parse(in);
  EXPECT_EQ(manifest.at("seed").get<std::uint64_t>(), 5u);
  EXPECT_EQ(manifest.at("config").at("seed").get<std::uint64_t>(), 5u);
}

TEST(Cli, MissingConfigFileFailsWithOne) {
  std::string dir = fresh_dir("missing");
  int rc = run_tool("train-node --config " + dir + "/nope.json --out " + dir + "/out");
  EXPECT_EQ(rc, 1);
}

TEST(Cli, MalformedJsonFailsWithOne) {
  std::string dir = fresh_dir("malformed");
  std::string path = dir + "/bad.json";
  std::ofstream(path) << "{ this is not json";
  int rc = run_tool("train-node --config " + path + " --out " + dir + "/out");
  EXPECT_EQ(rc, 1);
}

TEST(Cli, UnknownConfigKeyFailsWithOne) {
  std::string dir = fresh_dir("unknown_key");
  json cfg = tiny_train_config();
  cfg["bogus"] = true;
  std::string path = write_config(dir, "cfg.json", cfg);
  int rc = run_tool("train-node --config " + path + " --out " + dir + "/out");
  EXPECT_EQ(rc, 1);
}

TEST(Cli, KindMustMatchSubcommand) {
  std::string dir = fresh_dir("wrong_kind");
  std::string path = write_config(dir, "cfg.json", tiny_train_config());
  // spiral-train belongs to train-node, not predict.
  int rc = run_tool("predict --config " + path + " --out " + dir + "/out");
  EXPECT_EQ(rc, 1);

  json no_kind = json{{"seed", 1}};
  std::string path2 = write_config(dir, "nokind.json", no_kind);
  EXPECT_EQ(run_tool("train-node --config " + path2 + " --out " + dir + "/out"), 1);
}

TEST(Cli, NoSubcommandFailsWithOne) {
  EXPECT_EQ(run_tool(""), 1);
  EXPECT_EQ(run_tool("frobnicate --config x"), 1);
}

TEST(Cli, NumericalFailureExitsWithTwo) {
  std::string dir = fresh_dir("diverge");
  // Expanding spiral integrated far past the divergence guard.
  json cfg = json{{"kind", "spiral-train"},
                  {"seed", 1},
                  {"eta", -1.0},
                  {"omega", 0.1},
                  {"steps", 200},
                  {"ts", 0.1}};
  std::string path = write_config(dir, "cfg.json", cfg);
  int rc = run_tool("train-node --config " + path + " --out " + dir + "/out");
  EXPECT_EQ(rc, 2);
}

}  // namespace
