#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "topo_nas/config.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/pipeline.hpp"

namespace {

using topo_nas::Stage;

const std::map<std::string, Stage> kSubcommands = {
    {"make-dataset", Stage::dataset},     {"train-supernet", Stage::supernet},
    {"sgld-sample", Stage::sgld},         {"train-ground-truth", Stage::ground_truth},
    {"rank-experiment", Stage::rank},     {"search", Stage::search},
    {"report", Stage::report},
};

struct Args {
  std::string config;
  std::string out = "experiment";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> stage;
  bool resume = false;
  bool quiet = false;
};

void add_common(CLI::App* sub, Args& a) {
  sub->add_option("--config", a.config, "experiment config (INI)")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "experiment directory")->capture_default_str();
  sub->add_option("--seed", a.seed, "override [experiment] seed");
  sub->add_option("--stage", a.stage, "run-all: last stage to run");
  sub->add_flag("--resume", a.resume, "continue partially completed stages");
  sub->add_flag("-q,--quiet", a.quiet, "no progress messages");
}

int run(const std::string& command, const Args& a) {
  auto cfg = topo_nas::load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  std::vector<Stage> stages;
  if (command == "run-all") {
    stages = topo_nas::stages_through(a.stage ? topo_nas::parse_stage(*a.stage) : Stage::report);
  } else {
    const auto s = kSubcommands.at(command);
    if (a.stage && topo_nas::parse_stage(*a.stage) != s)
      topo_nas::fail(topo_nas::ErrorCategory::invalid_argument,
                     "--stage " + *a.stage + " does not match subcommand " + command);
    stages = {s};
  }

  topo_nas::PipelineOptions opts;
  opts.out_dir = a.out;
  opts.resume = a.resume;
  opts.log = a.quiet ? nullptr : &std::cerr;
  topo_nas::Experiment ex(cfg, opts);
  ex.run(stages);
  std::cout << "ok " << command << " config_hash=" << topo_nas::hex64(ex.config_hash()) << " out=" << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"topo-nas: one-shot architecture search with Langevin-sampled supernet weights"};
  app.require_subcommand(1);
  Args args;
  std::string command;
  std::vector<std::pair<std::string, std::string>> help = {
      {"make-dataset", "generate the train/validation splits"},
      {"train-supernet", "train the weight-sharing supernet"},
      {"sgld-sample", "run the Langevin chain from the trained supernet"},
      {"train-ground-truth", "train the ranking architectures from scratch"},
      {"rank-experiment", "score architectures and compute Kendall tau tables"},
      {"search", "NSGA-II search over cost and estimated accuracy"},
      {"report", "aggregate artifacts into a summary"},
      {"run-all", "run every stage (through --stage)"},
  };
  for (const auto& [name, desc] : help) {
    auto* sub = app.add_subcommand(name, desc);
    add_common(sub, args);
    sub->callback([&command, n = name] { command = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << topo_nas::category_name(topo_nas::ErrorCategory::invalid_argument) << ": " << e.what()
              << "\n";
    return topo_nas::exit_code(topo_nas::ErrorCategory::invalid_argument);
  }

  try {
    return run(command, args);
  } catch (const topo_nas::Error& e) {
    std::cerr << "error: " << topo_nas::category_name(e.category()) << ": " << e.what() << "\n";
    return topo_nas::exit_code(e.category());
  } catch (const std::bad_alloc&) {
    std::cerr << "error: io: out of memory\n";
    return topo_nas::exit_code(topo_nas::ErrorCategory::io);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 2;
  }
}
