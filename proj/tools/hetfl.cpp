#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hetfl/app.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Federated hetero-task learning simulator"};
  app.set_version_flag("--version", hetfl::kToolVersion);
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  auto* run = app.add_subcommand("run", "Run an experiment file");
  run->add_option("file", config, "Experiment file (JSON)")->required();
  run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--out", out, "Output directory");

  std::string baseline, method;
  std::optional<std::string> compare_out;
  auto* compare = app.add_subcommand("compare", "Per-client improvement of one run over a baseline run");
  compare->add_option("baseline", baseline, "Baseline run directory")->required();
  compare->add_option("method", method, "Method run directory")->required();
  compare->add_option("--out", compare_out, "Output directory (default <method>/comparison)");

  std::string log;
  auto* audit = app.add_subcommand("protocol-audit", "Summarize a communication log");
  audit->add_option("file", log, "communication.log")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : hetfl::kExitConfig;
  }

  if (*run) return hetfl::cmd_run(config, {seed, out}, std::cout, std::cerr);
  if (*compare) return hetfl::cmd_compare(baseline, method, compare_out, std::cout, std::cerr);
  return hetfl::cmd_protocol_audit(log, std::cout, std::cerr);
}
