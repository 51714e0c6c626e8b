#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "fnn/experiment.hpp"

namespace {

namespace fs = std::filesystem;
using Eigen::VectorXd;
using nlohmann::json;
using namespace fnn;

std::string fresh_dir(const std::string& name) {
  fs::path p = fs::path("experiment_test_out") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

json tiny_train_config() {
  return json{{"kind", "spiral-train"}, {"seed", 3},       {"steps", 120},
              {"iterations", 30},       {"hidden", {8.0}}, {"ts", 0.01}};
}

TEST(Cfg, StrictReaderSemantics) {
  Cfg c(json{{"a", 2.5}, {"n", 4}, {"v", {1.0, 2.0}}, {"s", "x"}});
  EXPECT_DOUBLE_EQ(c.num("a"), 2.5);
  EXPECT_DOUBLE_EQ(c.num("b", 1.5), 1.5);
  EXPECT_EQ(c.integer("n", 0), 4);
  EXPECT_EQ(c.str("s"), "x");
  EXPECT_EQ(c.vec("v", {}, 2), (std::vector<double>{1.0, 2.0}));
  c.finish();
  // Every consumed key, given or defaulted, lands in the echo.
  EXPECT_DOUBLE_EQ(c.echo().at("b").get<double>(), 1.5);
  EXPECT_EQ(c.echo().at("n").get<int>(), 4);

  Cfg missing(json{{"kind", "x"}});
  EXPECT_THROW(missing.num("absent"), ConfigError);
  EXPECT_THROW(missing.str("absent"), ConfigError);

  Cfg wrong(json{{"a", "text"}, {"n", 1.5}, {"v", 3.0}, {"w", {1.0, "s"}}, {"u", -1}});
  EXPECT_THROW(wrong.num("a"), ConfigError);
  EXPECT_THROW(wrong.integer("n", 0), ConfigError);
  EXPECT_THROW(wrong.vec("v", {}), ConfigError);
  EXPECT_THROW(wrong.vec("w", {}), ConfigError);
  EXPECT_THROW(wrong.u64("u", 0), ConfigError);

  Cfg lengths(json{{"v", {1.0, 2.0, 3.0}}});
  EXPECT_THROW(lengths.vec("v", {}, 2), ConfigError);

  Cfg unused(json{{"a", 1.0}, {"stray", 2.0}});
  unused.num("a");
  EXPECT_THROW(unused.finish(), ConfigError);

  EXPECT_THROW(Cfg(json::array()), ConfigError);
}

TEST(HashTag, MatchesKnownFnvVectors) {
  EXPECT_EQ(hash_tag(""), "fnv1a64:cbf29ce484222325");
  EXPECT_EQ(hash_tag("a"), "fnv1a64:af63dc4c8601ec8c");
}

TEST(ExportPlotdata, WritesLongFormatGolden) {
  Report r;
  Series s;
  s.name = "err";
  s.x = {0.0, 1.0};
  s.y = {0.5, 0.25};
  r.curves.push_back(s);
  Grid g;
  g.name = "error";
  g.row_label = "gain";
  g.col_label = "level";
  g.rows = {5.0, 10.0};
  g.cols = {0.0, 1.0};
  g.values = {{1.0, 2.0}, {3.0, 4.0}};
  r.grids.push_back(g);

  std::string dir = fresh_dir("plotdata");
  std::string path = dir + "/plotdata.csv";
  export_plotdata(r, path);
  EXPECT_EQ(fnn::detail::read_file_bytes(path),
            "series,x,y\n"
            "err,0,0.5\n"
            "err,1,0.25\n"
            "error/gain=5,0,1\n"
            "error/gain=5,1,2\n"
            "error/gain=10,0,3\n"
            "error/gain=10,1,4\n");

  Report empty;
  export_plotdata(empty, path);
  EXPECT_EQ(fnn::detail::read_file_bytes(path), "series,x,y\n");
}

TEST(Median, OddEvenAndSingle) {
  EXPECT_DOUBLE_EQ(fnn::detail::median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(fnn::detail::median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_DOUBLE_EQ(fnn::detail::median({7.0}), 7.0);
}

// A trajectory generated by the net's own Euler map is reproduced exactly by
// the cascade, so every score is identically zero; with the linear observer
// started on the trajectory the deviation stays at exact zero too.
TEST(EvaluateMultistep, SelfConsistentModelScoresZero) {
  MlpNet net = make_mlp({2, 8, 2}, 19);
  auto f = [&net](const VectorXd& x, const VectorXd&, double) { return mlp_forward(net, x); };
  VectorXd x0(2);
  x0 << 0.5, -0.3;
  Trajectory clean = rollout(f, x0, no_input, 0.0, 0.05, 60, Method::Euler);

  FeedbackGain off = scalar_gain(FeedbackMode::Off, 0.0, 2, 0.0, 0.05);
  fnn::detail::MultistepStats s = fnn::detail::evaluate_multistep(net, off, clean, clean, 10);
  EXPECT_EQ(s.mean_err, 0.0);
  EXPECT_EQ(s.rms_err, 0.0);
  EXPECT_EQ(s.one_step_err, 0.0);
  EXPECT_EQ(s.max_err, 0.0);
  EXPECT_EQ(s.count, 510);

  FeedbackGain lin = scalar_gain(FeedbackMode::Linear, 4.0, 2, 0.1, 0.05);
  fnn::detail::MultistepStats sl = fnn::detail::evaluate_multistep(net, lin, clean, clean, 10);
  EXPECT_EQ(sl.mean_err, 0.0);
  EXPECT_EQ(sl.max_err, 0.0);
}

TEST(EvaluateMultistep, StrideAndValidation) {
  MlpNet net = make_mlp({2, 8, 2}, 19);
  auto f = [&net](const VectorXd& x, const VectorXd&, double) { return mlp_forward(net, x); };
  VectorXd x0(2);
  x0 << 0.5, -0.3;
  Trajectory clean = rollout(f, x0, no_input, 0.0, 0.05, 60, Method::Euler);
  FeedbackGain off = scalar_gain(FeedbackMode::Off, 0.0, 2, 0.0, 0.05);

  fnn::detail::MultistepStats s =
      fnn::detail::evaluate_multistep(net, off, clean, clean, 10, nullptr, 2);
  EXPECT_EQ(s.count, 260);  // starts at k = 0, 2, ..., 50

  Trajectory shorter = clean;
  shorter.times.pop_back();
  shorter.states.pop_back();
  EXPECT_THROW(fnn::detail::evaluate_multistep(net, off, clean, shorter, 10),
               std::invalid_argument);
  EXPECT_THROW(fnn::detail::evaluate_multistep(net, off, clean, clean, 61),
               std::invalid_argument);
  EXPECT_THROW(fnn::detail::evaluate_multistep(net, off, clean, clean, 10, nullptr, 0),
               std::invalid_argument);
}

TEST(SubcommandKinds, TableIsExact) {
  const auto& m = subcommand_kinds();
  ASSERT_EQ(m.size(), 6u);
  EXPECT_EQ(m.at("train-node"), (std::vector<std::string>{"spiral-train", "quad-train"}));
  EXPECT_EQ(m.at("train-feedback"), (std::vector<std::string>{"feedback-train"}));
  EXPECT_EQ(m.at("predict"),
            (std::vector<std::string>{"spiral-transfer", "ballistic-predict"}));
  EXPECT_EQ(m.at("mpc-sim"), (std::vector<std::string>{"quad-mpc-compare"}));
  EXPECT_EQ(m.at("ablate"),
            (std::vector<std::string>{"gain-heatmap", "decay-ablation", "step-disturbance"}));
  EXPECT_EQ(m.at("verify-bounds"), (std::vector<std::string>{"bound-check"}));
}

TEST(RunExperiment, WritesVerifiableArtifactsAndManifest) {
  std::string dir = fresh_dir("train");
  Report r = run_experiment(tiny_train_config(), dir);
  EXPECT_EQ(r.kind, "spiral-train");
  EXPECT_EQ(r.seed, 3u);
  EXPECT_GT(r.metrics.count("rollout_rmse"), 0u);
  EXPECT_GT(r.metrics.count("final_train_loss"), 0u);

  for (const char* name :
       {"truth.csv", "loss.csv", "node.json", "model_rollout.csv", "plotdata.csv",
        "report.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(dir) / name)) << name;

  json manifest = json::parse(fnn::detail::read_file_bytes(dir + "/manifest.json"));
  EXPECT_EQ(manifest.at("kind"), "spiral-train");
  EXPECT_EQ(manifest.at("config_hash"), r.config_hash);
  // The echo records defaulted keys too.
  EXPECT_EQ(manifest.at("config").at("x0"), json({9.0, 0.0}));

  // Every artifact hash in the manifest re-verifies against the bytes on
  // disk; report.json is hashed over its deterministic body.
  const json& arts = manifest.at("artifacts");
  ASSERT_GE(arts.size(), 6u);
  for (auto it = arts.begin(); it != arts.end(); ++it) {
    std::string bytes = fnn::detail::read_file_bytes(dir + "/" + it.key());
    if (it.key() == "report.json") {
      json full = json::parse(bytes);
      EXPECT_TRUE(full.contains("wall_time_seconds"));
      full.erase("wall_time_seconds");
      bytes = full.dump(1) + "\n";
    }
    EXPECT_EQ(it.value().get<std::string>(), hash_tag(bytes)) << it.key();
  }

  // The trained checkpoint is loadable and matches the report's own rollout.
  MlpNet net = load_checkpoint(dir + "/node.json");
  EXPECT_EQ(net.input_dim(), 2);
  EXPECT_EQ(net.output_dim(), 2);
}

TEST(RunExperiment, SameConfigSameBytes) {
  std::string a = fresh_dir("det_a");
  std::string b = fresh_dir("det_b");
  run_experiment(tiny_train_config(), a);
  run_experiment(tiny_train_config(), b);

  json ma = json::parse(fnn::detail::read_file_bytes(a + "/manifest.json"));
  json mb = json::parse(fnn::detail::read_file_bytes(b + "/manifest.json"));
  EXPECT_EQ(ma.at("artifacts"), mb.at("artifacts"));

  json ra = json::parse(fnn::detail::read_file_bytes(a + "/report.json"));
  json rb = json::parse(fnn::detail::read_file_bytes(b + "/report.json"));
  ra.erase("wall_time_seconds");
  rb.erase("wall_time_seconds");
  EXPECT_EQ(ra, rb);

  // A different seed changes the trained artifacts.
  json shifted = tiny_train_config();
  shifted["seed"] = 4;
  std::string cdir = fresh_dir("det_c");
  run_experiment(shifted, cdir);
  json mc = json::parse(fnn::detail::read_file_bytes(cdir + "/manifest.json"));
  EXPECT_NE(ma.at("artifacts").at("node.json"), mc.at("artifacts").at("node.json"));
}

TEST(RunExperiment, RejectsUnknownKindAndKeys) {
  EXPECT_THROW(run_experiment(json{{"kind", "nope"}}, fresh_dir("bad_kind")), ConfigError);
  json cfg = tiny_train_config();
  cfg["bogus"] = 1;
  EXPECT_THROW(run_experiment(cfg, fresh_dir("bad_key")), ConfigError);
  EXPECT_THROW(run_experiment(json::array(), fresh_dir("bad_shape")), ConfigError);
}

}  // namespace
