#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demf/commands.hpp"
#include "demf/config.hpp"
#include "demf/error.hpp"

namespace {

// --set key=value, applied after the config file.
void apply_overrides(demf::RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw demf::ConfigInvalid("--set expects key=value, got '" + s + "'");
    demf::apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"demf: deformable multi-modal fusion toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "run-config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", sets, "override a config key (key=value), repeatable");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  auto* train = app.add_subcommand("train", "train a toy detector, write checkpoint and metrics");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
  auto* ablate = app.add_subcommand("ablate", "train one model per knob setting");
  app.add_subcommand("synth", "dump synthetic scenes as box records");
  std::string axis;
  ablate->add_option("axis", axis, "scales | samples | heads | offset-mode")->required();
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint to load (default: paths.checkpoint)");

  CLI11_PARSE(app, argc, argv);

  return demf::run_guarded(
      [&]() -> int {
        demf::RunConfig cfg = config_path.empty() ? demf::default_config() : demf::load_config(config_path);
        apply_overrides(cfg, sets);
        if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;
        cfg.validate();
        if (gradcheck->parsed()) return demf::cmd_gradcheck(cfg, std::cout, std::cerr);
        if (train->parsed()) return demf::cmd_train(cfg, std::cout, std::cerr);
        if (eval->parsed()) return demf::cmd_eval(cfg, std::cout, std::cerr);
        if (ablate->parsed()) return demf::cmd_ablate(cfg, axis, std::cout, std::cerr);
        return demf::cmd_synth(cfg, std::cout, std::cerr);
      },
      std::cerr);
}
