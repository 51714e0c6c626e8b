#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fnn/experiment.hpp"

// Exit codes: 0 success, 1 configuration error, 2 numerical failure.

namespace {

int run_subcommand(const std::string& sub, const std::string& config_path,
                   std::optional<std::uint64_t> seed, const std::string& out_dir) {
  std::ifstream in(config_path);
  if (!in) throw fnn::ConfigError("cannot open config: " + config_path);
  nlohmann::json config;
  try {
    in >> config;
  } catch (const nlohmann::json::exception& e) {
    throw fnn::ConfigError(std::string("config parse error: ") + e.what());
  }
  if (!config.is_object()) throw fnn::ConfigError("config must be a JSON object");
  if (seed) config["seed"] = *seed;

  const auto& allowed = fnn::subcommand_kinds().at(sub);
  std::string kind = config.contains("kind") && config["kind"].is_string()
                         ? config["kind"].get<std::string>()
                         : std::string();
  if (std::find(allowed.begin(), allowed.end(), kind) == allowed.end())
    throw fnn::ConfigError("kind '" + kind + "' is not valid for subcommand '" + sub +
                           "'");

  fnn::Report rep = fnn::run_experiment(config, out_dir);
  std::cout << "wrote " << out_dir << "/report.json (kind " << rep.kind << ", seed "
            << rep.seed << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"experiment runner for the feedback neural network library"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed_val = 0;
  for (const auto& [name, kinds] : fnn::subcommand_kinds()) {
    std::string desc = "run experiment kinds:";
    for (const auto& k : kinds) desc += " " + k;
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON experiment config file")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_val, "override the config seed");
    sub->add_option("--out", out_dir, "output directory (default: out)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    std::optional<std::uint64_t> seed;
    if (sub->count("--seed") > 0) seed = seed_val;
    return run_subcommand(sub->get_name(), config_path, seed, out_dir);
  } catch (const fnn::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const fnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
