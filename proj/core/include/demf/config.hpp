#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>

#include "demf/geometry.hpp"
#include "demf/grad_suite.hpp"
#include "demf/model.hpp"
#include "demf/scene.hpp"
#include "demf/train.hpp"

namespace demf {

enum class Precision { float64, float32 };

std::string to_string(Precision p);

// True when the library was compiled with float32 tensors.
bool built_float32();

struct RunPaths {
  std::string checkpoint = "demf.ckpt";
  std::string metrics = "metrics.csv";
  std::string confusion = "confusion.csv";
  std::string report = "gradcheck.csv";
  std::string output = "out";  // synth dumps and ablation tables go under here
  std::string camera;          // optional camera file, first camera used
};

struct RunConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::float64;
  SceneSpec scene;
  ModelConfig model;
  TrainSettings train;
  EvalSettings eval;
  GradSuiteSettings gradcheck;
  std::size_t synth_scenes = 4;
  RunPaths paths;  // paths.camera is loaded into scene.camera

  // Throws ConfigInvalid.
  void validate() const;
};

// Flat text: `key = value` lines, `[section]` headers prefixing later keys
// with "section.", `#` comments. Unknown keys are errors. DEMF_SEED in the
// environment overrides `seed`. Relative paths resolve against `base_dir`.
RunConfig parse_config(std::istream& in, const std::string& base_dir = "",
                       const std::string& source = "<config>");
RunConfig load_config(const std::string& path);
// Defaults plus the DEMF_SEED override.
RunConfig default_config();

// Applies a single `key = value` assignment (also used for CLI overrides).
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// Canonical dump, parseable by parse_config.
void write_config(std::ostream& out, const RunConfig& cfg);

}  // namespace demf
