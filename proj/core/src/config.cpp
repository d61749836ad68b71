#include "demf/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>
#include <vector>

#include "demf/error.hpp"
#include "demf/interchange.hpp"

namespace demf {

namespace fs = std::filesystem;

std::string to_string(Precision p) { return p == Precision::float64 ? "float64" : "float32"; }

bool built_float32() { return sizeof(Real) == sizeof(float); }

namespace {

const std::vector<std::string> kGroups{"point_encoder", "image_encoder", "demf", "heads"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigInvalid(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_real(const std::string& key, const std::string& v) {
  try {
    return parse_real(v);
  } catch (const Error&) {
    throw ConfigInvalid(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigInvalid(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_real(v[i]);
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DEMF_SIZE_KEY(NAME, FIELD)                                                        \
  Key {                                                                                   \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_size(NAME, v); },         \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                        \
  }
#define DEMF_REAL_KEY(NAME, FIELD)                                                        \
  Key {                                                                                   \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_real(NAME, v); },         \
        [](const RunConfig& c) { return format_real(c.FIELD); }                           \
  }
#define DEMF_BOOL_KEY(NAME, FIELD)                                                        \
  Key {                                                                                   \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); },         \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }        \
  }
#define DEMF_PATH_KEY(NAME, FIELD)                                                        \
  Key {                                                                                   \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = v; },                        \
        [](const RunConfig& c) { return c.FIELD; }                                        \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> kKeys{
      Key{"seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64("seed", v); },
          [](const RunConfig& c) { return std::to_string(c.seed); }},
      Key{"precision",
          [](RunConfig& c, const std::string& v) {
            if (v == "float64") {
              c.precision = Precision::float64;
            } else if (v == "float32") {
              c.precision = Precision::float32;
            } else {
              throw ConfigInvalid("precision: expected float64 or float32, got '" + v + "'");
            }
          },
          [](const RunConfig& c) { return to_string(c.precision); }},
      Key{"scene.num_classes",
          [](RunConfig& c, const std::string& v) {
            c.scene.num_classes = to_size("scene.num_classes", v);
            c.model.demf.num_classes = c.scene.num_classes;
          },
          [](const RunConfig& c) { return std::to_string(c.scene.num_classes); }},
      DEMF_SIZE_KEY("scene.objects", scene.objects_per_scene),
      DEMF_REAL_KEY("scene.ambiguity", scene.ambiguity),
      DEMF_SIZE_KEY("scene.points", scene.num_points),
      DEMF_SIZE_KEY("scene.image_width", scene.image_width),
      DEMF_SIZE_KEY("scene.image_height", scene.image_height),
      DEMF_REAL_KEY("scene.clutter", scene.clutter_fraction),
      DEMF_SIZE_KEY("scene.min_points", scene.min_points),
      DEMF_SIZE_KEY("model.candidates", model.candidates),
      DEMF_SIZE_KEY("model.channels", model.demf.channels),
      DEMF_SIZE_KEY("model.heads", model.demf.heads),
      DEMF_SIZE_KEY("model.samples", model.demf.samples),
      DEMF_SIZE_KEY("model.levels", model.demf.levels),
      DEMF_SIZE_KEY("model.layers", model.demf.layers),
      DEMF_REAL_KEY("model.dropout", model.demf.dropout),
      Key{"model.offset_mode",
          [](RunConfig& c, const std::string& v) {
            try {
              c.model.demf.offset_mode = parse_offset_mode(v);
            } catch (const Error&) {
              throw ConfigInvalid("model.offset_mode: expected grid or learned, got '" + v + "'");
            }
          },
          [](const RunConfig& c) { return to_string(c.model.demf.offset_mode); }},
      DEMF_BOOL_KEY("model.fusion", model.demf.fusion),
      DEMF_REAL_KEY("model.radius", model.neighborhood_radius),
      DEMF_BOOL_KEY("model.freeze_image", model.freeze_image),
      DEMF_REAL_KEY("optim.lr", train.optimizer.lr),
      DEMF_REAL_KEY("optim.beta1", train.optimizer.beta1),
      DEMF_REAL_KEY("optim.beta2", train.optimizer.beta2),
      DEMF_REAL_KEY("optim.eps", train.optimizer.eps),
      DEMF_REAL_KEY("optim.weight_decay", train.optimizer.weight_decay),
      DEMF_SIZE_KEY("train.steps", train.steps),
      DEMF_SIZE_KEY("train.batch", train.batch),
      Key{"train.scene_seed",
          [](RunConfig& c, const std::string& v) { c.train.scene_seed = to_u64("train.scene_seed", v); },
          [](const RunConfig& c) { return std::to_string(c.train.scene_seed); }},
      DEMF_SIZE_KEY("train.scene_pool", train.scene_pool),
      DEMF_SIZE_KEY("train.log_every", train.log_every),
      DEMF_SIZE_KEY("train.eval_every", train.eval_every),
      DEMF_REAL_KEY("loss.classification", train.loss.classification),
      DEMF_REAL_KEY("loss.center", train.loss.center),
      DEMF_REAL_KEY("loss.size", train.loss.size),
      DEMF_REAL_KEY("loss.assign_radius", train.loss.assign_radius),
      Key{"eval.scene_seed",
          [](RunConfig& c, const std::string& v) { c.eval.scene_seed = to_u64("eval.scene_seed", v); },
          [](const RunConfig& c) { return std::to_string(c.eval.scene_seed); }},
      DEMF_SIZE_KEY("eval.scenes", eval.scenes),
      Key{"eval.iou_thresholds",
          [](RunConfig& c, const std::string& v) {
            c.eval.iou_thresholds.clear();
            for (const std::string& item : split_list(v)) {
              c.eval.iou_thresholds.push_back(to_real("eval.iou_thresholds", item));
            }
          },
          [](const RunConfig& c) { return join_reals(c.eval.iou_thresholds); }},
      DEMF_BOOL_KEY("eval.ensemble", eval.ensemble),
      DEMF_REAL_KEY("eval.nms_iou", eval.nms_iou),
      DEMF_REAL_KEY("eval.score_threshold", eval.score_threshold),
      DEMF_REAL_KEY("eval.assign_radius", eval.assign_radius),
      DEMF_SIZE_KEY("gradcheck.seeds", gradcheck.seeds),
      DEMF_REAL_KEY("gradcheck.h", gradcheck.h),
      DEMF_REAL_KEY("gradcheck.tolerance", gradcheck.tolerance),
      Key{"gradcheck.base_seed",
          [](RunConfig& c, const std::string& v) {
            c.gradcheck.base_seed = to_u64("gradcheck.base_seed", v);
          },
          [](const RunConfig& c) { return std::to_string(c.gradcheck.base_seed); }},
      Key{"gradcheck.ops",
          [](RunConfig& c, const std::string& v) { c.gradcheck.ops = split_list(v); },
          [](const RunConfig& c) { return join(c.gradcheck.ops); }},
      DEMF_SIZE_KEY("synth.scenes", synth_scenes),
      DEMF_PATH_KEY("paths.checkpoint", paths.checkpoint),
      DEMF_PATH_KEY("paths.metrics", paths.metrics),
      DEMF_PATH_KEY("paths.confusion", paths.confusion),
      DEMF_PATH_KEY("paths.report", paths.report),
      DEMF_PATH_KEY("paths.output", paths.output),
      Key{"paths.camera",
          [](RunConfig& c, const std::string& v) {
            c.paths.camera = v;
            if (v.empty()) {
              c.scene.camera.reset();
              return;
            }
            try {
              c.scene.camera = read_camera_file(v).front();
            } catch (const Error& e) {
              throw ConfigInvalid(std::string("paths.camera: ") + e.what());
            }
          },
          [](const RunConfig& c) { return c.paths.camera; }},
  };
  return kKeys;
}

#undef DEMF_SIZE_KEY
#undef DEMF_REAL_KEY
#undef DEMF_BOOL_KEY
#undef DEMF_PATH_KEY

void apply_env(RunConfig& cfg) {
  if (const char* env = std::getenv("DEMF_SEED"); env != nullptr && *env != '\0') {
    cfg.seed = to_u64("DEMF_SEED", trim(env));
  }
}

void require_parent(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigInvalid(key + " must not be empty");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw ConfigInvalid(key + ": directory " + parent.string() + " does not exist");
  }
}

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  const std::string prefix = "optim.lr_mult.";
  if (key.rfind(prefix, 0) == 0) {
    const std::string group = key.substr(prefix.size());
    if (std::find(kGroups.begin(), kGroups.end(), group) == kGroups.end()) {
      throw ConfigInvalid("unknown parameter group '" + group + "'");
    }
    cfg.train.lr_multipliers[group] = to_real(key, v);
    return;
  }
  for (const Key& k : keys()) {
    if (k.name == key) {
      k.set(cfg, v);
      return;
    }
  }
  throw ConfigInvalid("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  if (precision == Precision::float64 && built_float32()) {
    throw ConfigInvalid("precision float64 requested from a float32 build");
  }
  if (scene.num_classes != model.demf.num_classes) {
    throw ConfigInvalid("scene and model class counts differ");
  }
  try {
    scene.validate();
  } catch (const SpecInvalid& e) {
    throw ConfigInvalid(std::string("scene: ") + e.what());
  }
  model.demf.validate();
  if (model.candidates == 0) throw ConfigInvalid("model.candidates must be positive");
  if (!(model.neighborhood_radius > 0.0)) throw ConfigInvalid("model.radius must be positive");
  const AdamWOptions& o = train.optimizer;
  if (!(o.lr >= 0.0)) throw ConfigInvalid("optim.lr must be non-negative");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0)) {
    throw ConfigInvalid("optimizer betas must lie in [0, 1)");
  }
  if (!(o.eps > 0.0)) throw ConfigInvalid("optim.eps must be positive");
  if (!(o.weight_decay >= 0.0)) throw ConfigInvalid("optim.weight_decay must be non-negative");
  for (const auto& [group, m] : train.lr_multipliers) {
    if (!(m >= 0.0)) throw ConfigInvalid("lr multiplier of " + group + " must be non-negative");
  }
  if (train.batch == 0) throw ConfigInvalid("train.batch must be positive");
  for (double t : eval.iou_thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigInvalid("iou thresholds must lie in (0, 1)");
  }
  if (!(eval.assign_radius > 0.0) || !(train.loss.assign_radius > 0.0)) {
    throw ConfigInvalid("assignment radii must be positive");
  }
  if (!(gradcheck.h > 0.0) || !(gradcheck.tolerance >= 0.0)) {
    throw ConfigInvalid("gradcheck.h must be positive and gradcheck.tolerance non-negative");
  }
  for (const std::string& op : gradcheck.ops) {
    const auto& all = grad_suite_ops();
    if (std::find(all.begin(), all.end(), op) == all.end()) {
      throw ConfigInvalid("unknown grad-check op '" + op + "'");
    }
  }
  require_parent("paths.checkpoint", paths.checkpoint);
  require_parent("paths.metrics", paths.metrics);
  require_parent("paths.confusion", paths.confusion);
  require_parent("paths.report", paths.report);
  require_parent("paths.output", paths.output);
}

RunConfig parse_config(std::istream& in, const std::string& base_dir, const std::string& source) {
  RunConfig cfg;
  std::string section;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigInvalid(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigInvalid(where + "expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigInvalid(where + "empty key");
    if (!section.empty()) key = section + "." + key;
    if (key.rfind("paths.", 0) == 0 && !value.empty() && !base_dir.empty() &&
        fs::path(value).is_relative()) {
      value = (fs::path(base_dir) / value).lexically_normal().string();
    }
    try {
      apply_setting(cfg, key, value);
    } catch (const ConfigInvalid& e) {
      throw ConfigInvalid(where + e.what());
    }
  }
  apply_env(cfg);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config file: " + path);
  return parse_config(in, fs::path(path).parent_path().string(), path);
}

RunConfig default_config() {
  RunConfig cfg;
  apply_env(cfg);
  return cfg;
}

void write_config(std::ostream& out, const RunConfig& cfg) {
  for (const Key& k : keys()) out << k.name << " = " << k.get(cfg) << '\n';
  for (const auto& [group, m] : cfg.train.lr_multipliers) {
    out << "optim.lr_mult." << group << " = " << format_real(m) << '\n';
  }
}

}  // namespace demf
