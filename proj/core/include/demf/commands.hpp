#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "demf/config.hpp"
#include "demf/train.hpp"

namespace demf {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitNumerical = 3,
  kExitCheckpoint = 4,
};

// Runs `body`, mapping library errors to exit codes and printing them on err.
int run_guarded(const std::function<int()>& body, std::ostream& err);

// Tolerance and step actually used for a config (float32 relaxes both).
struct GradTolerance {
  double h;
  double tolerance;
  bool relaxed;
};
GradTolerance effective_grad_tolerance(const RunConfig& cfg);
inline constexpr double kFloat32GradTolerance = 1e-2;
inline constexpr double kFloat32GradStep = 1e-3;

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_ablate(const RunConfig& cfg, const std::string& axis, std::ostream& out, std::ostream& err);
int cmd_synth(const RunConfig& cfg, std::ostream& out, std::ostream& err);

struct RunSummary {
  std::string label;  // knob value for ablation rows
  double final_loss = 0.0;
  EvalMetrics metrics;
};

// Fresh model from cfg.seed, trained per cfg.train, evaluated per cfg.eval.
RunSummary train_and_evaluate(const RunConfig& cfg);

// Sample count of both offset-mode rows (the grid needs a square count).
inline constexpr std::size_t kOffsetAblationSamples = 4;

// One config per knob setting, same seed. Axes: scales, samples, heads,
// offset-mode.
std::vector<std::pair<std::string, RunConfig>> ablation_settings(const RunConfig& cfg,
                                                                 const std::string& axis);

void write_eval_csv(std::ostream& out, const RunConfig& cfg, const EvalMetrics& m);
void write_ablation_csv(std::ostream& out, const std::string& axis,
                        const std::vector<RunSummary>& rows);

}  // namespace demf
