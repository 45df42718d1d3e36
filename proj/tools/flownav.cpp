// flownav: pretrain, train, eval, sweep, ablate, probe, report.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "flownav/commands.hpp"
#include "flownav/errors.hpp"

namespace {

void add_common(CLI::App* cmd, flownav::cli::CommonOptions& o) {
  cmd->add_option("--manifest", o.manifest, "run manifest (key = value)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "single seed; replaces the manifest's seed list");
  cmd->add_option("--out", o.out, "output root (default $FLOWNAV_OUT or ./runs)");
  cmd->add_option("--run-id", o.run_id, "run directory name under the output root");
  cmd->add_option("--jobs", o.jobs, "seeds trained concurrently")->check(CLI::PositiveNumber);
  cmd->add_option("--set", o.overrides, "override a manifest key: --set key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = flownav::cli;
  CLI::App app{"GNNavi toy laboratory"};
  app.require_subcommand(1);

  cli::CommonOptions common;
  std::filesystem::path checkpoint;
  std::filesystem::path run_dir;
  std::vector<std::size_t> positions;

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the toy backbone");
  auto* train = app.add_subcommand("train", "fine-tune over the manifest's seeds");
  auto* eval = app.add_subcommand("eval", "re-evaluate a trained checkpoint");
  auto* sweep = app.add_subcommand("sweep", "navigation-layer insertion position sweep");
  auto* ablate = app.add_subcommand("ablate", "path removal ablation");
  auto* probe = app.add_subcommand("probe", "attention saliency flow scores");
  auto* report = app.add_subcommand("report", "aggregate result files into tables");
  for (auto* c : {pretrain, train, eval, sweep, ablate, probe}) add_common(c, common);
  for (auto* c : {eval, probe})
    c->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--positions", positions, "layer indices (default: all)")->delimiter(',');
  report->add_option("--run-dir", run_dir, "directory to aggregate")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*pretrain) cli::cmd_pretrain(common, std::cout);
    else if (*train) std::cout << cli::cmd_train(common, std::cout).string() << '\n';
    else if (*eval) cli::cmd_eval(common, checkpoint, std::cout);
    else if (*sweep) {
      std::optional<std::vector<std::size_t>> p;
      if (!positions.empty()) p = positions;
      std::cout << cli::cmd_sweep(common, p, std::cout).string() << '\n';
    } else if (*ablate) std::cout << cli::cmd_ablate(common, std::cout).string() << '\n';
    else if (*probe) std::cout << cli::cmd_probe(common, checkpoint, std::cout).string() << '\n';
    else if (*report) cli::cmd_report(run_dir, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "flownav: " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
  return 0;
}
