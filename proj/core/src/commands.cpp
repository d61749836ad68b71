#include "demf/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "demf/checkpoint.hpp"
#include "demf/error.hpp"
#include "demf/grad_suite.hpp"
#include "demf/interchange.hpp"
#include "demf/model.hpp"

namespace demf {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigInvalid("cannot write " + path);
  return out;
}

std::string output_file(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.paths.output);
  return (fs::path(cfg.paths.output) / name).string();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigInvalid& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const SpecInvalid& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NonSquareK& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NonFiniteLoss& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DegenerateProjection& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const CheckpointMismatch& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

GradTolerance effective_grad_tolerance(const RunConfig& cfg) {
  const bool f32 = cfg.precision == Precision::float32 || built_float32();
  if (!f32) return {cfg.gradcheck.h, cfg.gradcheck.tolerance, false};
  return {std::max(cfg.gradcheck.h, kFloat32GradStep),
          std::max(cfg.gradcheck.tolerance, kFloat32GradTolerance), true};
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  cfg.validate();
  const GradTolerance tol = effective_grad_tolerance(cfg);
  GradSuiteSettings settings = cfg.gradcheck;
  settings.h = tol.h;
  settings.tolerance = tol.tolerance;

  out << "gradcheck: " << settings.seeds << " seeds per op, h " << format_real(tol.h)
      << ", tolerance " << format_real(tol.tolerance) << '\n';
  if (tol.relaxed) {
    out << "precision float32: tolerance relaxed from " << format_real(cfg.gradcheck.tolerance)
        << " to " << format_real(tol.tolerance) << ", h from " << format_real(cfg.gradcheck.h)
        << " to " << format_real(tol.h) << '\n';
  }

  const std::vector<GradCase> cases = run_grad_suite(settings);
  std::ofstream csv = open_out(cfg.paths.report);
  csv << "# demf gradcheck v1 precision=" << to_string(cfg.precision)
      << " h=" << format_real(tol.h) << " tolerance=" << format_real(tol.tolerance) << '\n';
  csv << "op,seed,coordinates,max_rel_error,passed\n";
  for (const GradCase& c : cases) {
    csv << c.op << ',' << c.seed << ',' << c.report.coordinates << ','
        << format_real(c.report.max_rel_error) << ',' << (c.report.passed ? 1 : 0) << '\n';
  }

  std::string first_failure;
  const auto& ops = settings.ops.empty() ? grad_suite_ops() : settings.ops;
  for (const std::string& op : ops) {
    double worst = 0.0;
    std::size_t failed = 0, runs = 0, coords = 0;
    for (const GradCase& c : cases) {
      if (c.op != op) continue;
      ++runs;
      coords = std::max(coords, c.report.coordinates);
      worst = std::max(worst, c.report.max_rel_error);
      if (!c.report.passed) {
        ++failed;
        if (first_failure.empty()) first_failure = op;
      }
    }
    out << "  " << std::left << std::setw(16) << op << " runs " << runs << "  max coords "
        << std::setw(5) << coords << " worst rel err " << std::scientific << std::setprecision(3)
        << worst << std::defaultfloat << "  " << (failed == 0 ? "PASS" : "FAIL") << '\n';
  }
  if (!first_failure.empty()) {
    err << "gradcheck failed: " << first_failure << '\n';
    return kExitNumerical;
  }
  out << "all ops pass\n";
  return kExitOk;
}

RunSummary train_and_evaluate(const RunConfig& cfg) {
  cfg.validate();
  ToyDetector model(cfg.model, cfg.seed);
  EvalSettings no_eval = cfg.eval;
  no_eval.scenes = 0;
  const std::vector<TraceRow> trace = train(model, cfg.scene, cfg.train, no_eval, cfg.seed);
  RunSummary s;
  s.final_loss = trace.empty() ? 0.0 : trace.back().total;
  s.metrics = evaluate(model, cfg.scene, cfg.eval);
  return s;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  cfg.validate();
  ToyDetector model(cfg.model, cfg.seed);
  out << "training " << model.params().scalar_count() << " parameters for " << cfg.train.steps
      << " steps (batch " << cfg.train.batch << ", fusion "
      << (cfg.model.demf.fusion ? "on" : "off") << ")\n";
  const std::vector<TraceRow> trace = train(model, cfg.scene, cfg.train, cfg.eval, cfg.seed);
  save_checkpoint(cfg.paths.checkpoint, model.params());
  std::ofstream csv = open_out(cfg.paths.metrics);
  write_trace_csv(csv, trace, cfg.model.demf.layers + 1);
  if (!trace.empty()) {
    const TraceRow& last = trace.back();
    out << "final loss " << fixed(last.total);
    if (last.has_eval) {
      out << "  ambiguous accuracy " << fixed(last.ambiguous_accuracy) << "  mAP@0.25 "
          << fixed(last.map25);
    }
    out << '\n';
  }
  out << "checkpoint " << cfg.paths.checkpoint << "\nmetrics " << cfg.paths.metrics << '\n';
  return kExitOk;
}

void write_eval_csv(std::ostream& out, const RunConfig& cfg, const EvalMetrics& m) {
  out << "# demf eval v1 ap=all-point nms=" << format_real(cfg.eval.nms_iou)
      << " ensemble=" << (cfg.eval.ensemble ? "true" : "false") << '\n';
  out << "metric,value\n";
  out << "ambiguous_accuracy," << format_real(m.ambiguous_accuracy()) << '\n';
  out << "ambiguous_candidates," << m.ambiguous_candidates << '\n';
  out << "accuracy," << format_real(m.accuracy()) << '\n';
  out << "assigned_candidates," << m.assigned_candidates << '\n';
  for (std::size_t t = 0; t < m.map.size(); ++t) {
    const std::string iou = format_real(cfg.eval.iou_thresholds[t]);
    out << "map@" << iou << ',' << format_real(m.map[t]) << '\n';
    for (std::size_t c = 0; c < m.ap[t].size(); ++c) {
      out << "ap@" << iou << "_class" << c << ',' << format_real(m.ap[t][c]) << '\n';
    }
  }
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  cfg.validate();
  ToyDetector model(cfg.model, cfg.seed);
  load_checkpoint(cfg.paths.checkpoint, model.params());
  const EvalMetrics m = evaluate(model, cfg.scene, cfg.eval);

  std::ofstream confusion = open_out(cfg.paths.confusion);
  m.confusion.write_csv(confusion);
  const std::string eval_path = output_file(cfg, "eval.csv");
  std::ofstream csv = open_out(eval_path);
  write_eval_csv(csv, cfg, m);

  out << "scenes " << cfg.eval.scenes << " (" << (cfg.eval.ensemble ? "ensemble" : "last head")
      << ")\n";
  out << "ambiguous accuracy " << fixed(m.ambiguous_accuracy()) << " over "
      << m.ambiguous_candidates << " candidates\n";
  out << "accuracy " << fixed(m.accuracy()) << " over " << m.assigned_candidates
      << " candidates\n";
  for (std::size_t t = 0; t < m.map.size(); ++t) {
    out << "mAP@" << format_real(cfg.eval.iou_thresholds[t]) << ' ' << fixed(m.map[t]) << '\n';
  }
  out << "confusion " << cfg.paths.confusion << "\nmetrics " << eval_path << '\n';
  return kExitOk;
}

std::vector<std::pair<std::string, RunConfig>> ablation_settings(const RunConfig& cfg,
                                                                 const std::string& axis) {
  std::vector<std::pair<std::string, RunConfig>> out;
  auto add = [&](const std::string& label, const std::function<void(RunConfig&)>& edit) {
    RunConfig c = cfg;
    edit(c);
    c.validate();
    out.emplace_back(label, std::move(c));
  };
  if (axis == "scales") {
    for (std::size_t l : {1, 2, 3}) {
      add(std::to_string(l), [l](RunConfig& c) { c.model.demf.levels = l; });
    }
  } else if (axis == "samples") {
    for (std::size_t k : {1, 2, 4}) {
      add(std::to_string(k), [k](RunConfig& c) { c.model.demf.samples = k; });
    }
  } else if (axis == "heads") {
    for (std::size_t m : {1, 2, 4}) {
      add(std::to_string(m), [m](RunConfig& c) { c.model.demf.heads = m; });
    }
  } else if (axis == "offset-mode") {
    for (OffsetMode mode : {OffsetMode::grid, OffsetMode::learned}) {
      add(to_string(mode), [mode](RunConfig& c) {
        c.model.demf.offset_mode = mode;
        c.model.demf.samples = kOffsetAblationSamples;
      });
    }
  } else {
    throw ConfigInvalid("unknown ablation axis '" + axis +
                        "' (expected scales, samples, heads or offset-mode)");
  }
  return out;
}

void write_ablation_csv(std::ostream& out, const std::string& axis,
                        const std::vector<RunSummary>& rows) {
  out << "# demf ablation v1\n";
  out << "axis,value,ambiguous_accuracy,accuracy,map25,map50,final_loss\n";
  for (const RunSummary& r : rows) {
    const auto map_at = [&](std::size_t i) {
      return i < r.metrics.map.size() ? format_real(r.metrics.map[i]) : std::string();
    };
    out << axis << ',' << r.label << ',' << format_real(r.metrics.ambiguous_accuracy()) << ','
        << format_real(r.metrics.accuracy()) << ',' << map_at(0) << ',' << map_at(1) << ','
        << format_real(r.final_loss) << '\n';
  }
}

int cmd_ablate(const RunConfig& cfg, const std::string& axis, std::ostream& out, std::ostream&) {
  cfg.validate();
  std::vector<RunSummary> rows;
  out << std::left << std::setw(12) << axis << std::setw(12) << "amb.acc" << std::setw(12)
      << "acc" << std::setw(12) << "mAP@0.25" << "loss\n";
  for (const auto& [label, run] : ablation_settings(cfg, axis)) {
    RunSummary s = train_and_evaluate(run);
    s.label = label;
    out << std::setw(12) << label << std::setw(12) << fixed(s.metrics.ambiguous_accuracy())
        << std::setw(12) << fixed(s.metrics.accuracy()) << std::setw(12)
        << (s.metrics.map.empty() ? std::string("-") : fixed(s.metrics.map.front()))
        << fixed(s.final_loss) << '\n';
    rows.push_back(std::move(s));
  }
  const std::string path = output_file(cfg, "ablate_" + axis + ".csv");
  std::ofstream csv = open_out(path);
  write_ablation_csv(csv, axis, rows);
  out << "table " << path << '\n';
  return kExitOk;
}

int cmd_synth(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  cfg.validate();
  std::vector<BoxRecord> records;
  std::ofstream cams = open_out(output_file(cfg, "cameras.txt"));
  cams << "# psi[0..8] width height, one line per scene\n";
  std::ofstream amb = open_out(output_file(cfg, "ambiguous.csv"));
  amb << "scene_id,gt_index,class_id,archetype,ambiguous\n";
  for (std::size_t s = 0; s < cfg.synth_scenes; ++s) {
    const std::uint64_t seed = cfg.train.scene_seed + s;
    const ToyScene scene = synth_scene(seed, cfg.scene);
    cams << format_camera(scene.cam) << '\n';
    for (std::size_t g = 0; g < scene.gts.size(); ++g) {
      records.push_back({static_cast<std::size_t>(seed), scene.gts[g].class_id, scene.gts[g].box,
                         false, 0.0});
      amb << seed << ',' << g << ',' << scene.gts[g].class_id << ',' << scene.archetype[g] << ','
          << static_cast<int>(scene.ambiguous[g]) << '\n';
    }
  }
  const std::string path = output_file(cfg, "scenes.txt");
  std::ofstream boxes = open_out(path);
  write_records(boxes, records);
  out << "wrote " << records.size() << " boxes from " << cfg.synth_scenes << " scenes to " << path
      << '\n';
  return kExitOk;
}

}  // namespace demf
