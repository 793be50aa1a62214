#include "pvseg/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pvseg/errors.hpp"
#include "pvseg/format.hpp"
#include "pvseg/imaging.hpp"
#include "pvseg/manifest.hpp"
#include "pvseg/synth.hpp"
#include "pvseg/trainer.hpp"

namespace fs = std::filesystem;

namespace pvseg {

namespace {

struct CommonOptions {
  TrainConfig config;
  std::string loss_reduction = "mean";
  std::string out_dir;
  bool invert_gray = false;
  bool verbose = false;

  TrainConfig resolved() const {
    TrainConfig c = config;
    c.loss_reduction = parse_loss_reduction(loss_reduction);
    c.validate();
    return c;
  }
};

void add_training_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--out", o.out_dir, "Output directory")->required();
  cmd->add_option("--alpha", o.config.alpha, "Spatial continuity weight")->capture_default_str();
  cmd->add_option("--lr", o.config.learning_rate, "Learning rate")->capture_default_str();
  cmd->add_option("--momentum", o.config.momentum, "SGD momentum")->capture_default_str();
  cmd->add_option("--iters", o.config.max_iterations, "Maximum iterations")->capture_default_str();
  cmd->add_option("--q-max", o.config.q_max, "Maximum number of clusters")->capture_default_str();
  cmd->add_option("--q-min", o.config.q_min, "Stop once this few clusters remain")->capture_default_str();
  cmd->add_option("--channels", o.config.feature_channels, "Feature channels of the 3x3 layers")
      ->capture_default_str();
  cmd->add_option("--seed", o.config.seed, "Random seed")->capture_default_str();
  cmd->add_option("--loss-reduction", o.loss_reduction, "Loss normalization")
      ->check(CLI::IsMember({"mean", "sum"}))
      ->capture_default_str();
  cmd->add_flag("--invert-gray", o.invert_gray, "Render hot clusters dark in segmented_gray.png");
  cmd->add_flag("-v,--verbose", o.verbose, "Print per-iteration losses to stderr");
}

IterationCallback progress(bool verbose) {
  if (!verbose) return {};
  return [](int it, const LossBreakdown<double>& l, int clusters) {
    std::cerr << "iter " << it << "  l_fs " << l.l_fs << "  l_sc " << l.l_sc << "  total "
              << l.total << "  clusters " << clusters << "\n";
  };
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// Writes the standard per-run outputs; returns the run's exit code.
int write_run(const fs::path& dir, const ImageGray& source, const SegmentationResult& r,
              const TrainConfig& config, const std::vector<std::string>& inputs, bool invert,
              double seconds) {
  fs::create_directories(dir);
  if (r.final_labels.size() > 0) {
    save_label_pgm(r.final_labels, dir / "labels.pgm");
    save_png(colorize(r.final_labels, config.q_max), dir / "segmented_rgb.png");
    save_png(labels_to_gray(r.final_labels, source, invert), dir / "segmented_gray.png");
  }
  std::ostringstream csv;
  write_loss_csv(csv, r.loss_history);
  write_text(dir / "loss.csv", csv.str());

  RunManifest m;
  m.config = config;
  m.inputs = inputs;
  m.output_dir = dir.string();
  m.stop_reason = to_string(r.stop_reason);
  m.iterations_run = r.iterations_run;
  m.unique_clusters_final = r.unique_clusters_final;
  m.wall_seconds = seconds;
  if (!r.loss_history.empty()) {
    m.loss_first = r.loss_history.front().total;
    m.loss_last = r.loss_history.back().total;
  }
  m.partial = r.stop_reason == StopReason::numeric_failure;
  m.message = r.failure_message;
  save_manifest(m, dir / "manifest.json");
  if (m.partial) {
    std::cerr << "numeric failure: " << r.failure_message << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = text.find(',', start);
    const std::string tok = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (tok.empty() || used != tok.size() || !std::isfinite(v) || v < 0) {
      throw CLI::ValidationError("--alphas", "malformed alpha list '" + text + "'");
    }
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  std::set<double> seen(out.begin(), out.end());
  if (seen.size() != out.size()) throw CLI::ValidationError("--alphas", "duplicate alpha values");
  return out;
}

int cmd_segment(const std::string& input, const CommonOptions& o) {
  const TrainConfig config = o.resolved();
  const ImageGray image = load_grayscale(input);
  const auto t0 = std::chrono::steady_clock::now();
  const SegmentationResult r = train(to_tensor(image), config, progress(o.verbose));
  const int code = write_run(o.out_dir, image, r, config, {input}, o.invert_gray, seconds_since(t0));
  std::cout << "stop_reason=" << to_string(r.stop_reason) << " iterations=" << r.iterations_run
            << " clusters=" << r.unique_clusters_final << "\n";
  return code;
}

int cmd_sweep(const std::string& input, const std::string& alpha_text, int jobs,
              const CommonOptions& o) {
  const std::vector<double> alphas = parse_alpha_list(alpha_text);
  const TrainConfig config = o.resolved();
  const ImageGray image = load_grayscale(input);
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = alpha_sweep(to_tensor(image), config, alphas, jobs);
  const double seconds = seconds_since(t0);

  const fs::path root = o.out_dir;
  fs::create_directories(root);
  std::ostringstream csv;
  csv << "alpha,iteration,total\n";
  nlohmann::json summary = nlohmann::json::array();
  int code = kExitOk;
  for (const SweepEntry& e : entries) {
    const std::string name = "alpha_" + format_real(e.alpha);
    nlohmann::json row{{"alpha", e.alpha}, {"directory", name}};
    if (!e.result) {
      std::cerr << "alpha " << format_real(e.alpha) << " failed: " << e.error << "\n";
      row["status"] = "error";
      row["message"] = e.error;
      code = kExitNumeric;
    } else {
      TrainConfig c = config;
      c.alpha = e.alpha;
      // Entries ran concurrently or back to back; per-entry timing is not tracked.
      const int rc = write_run(root / name, image, *e.result, c, {input}, o.invert_gray,
                               seconds / static_cast<double>(entries.size()));
      if (rc != kExitOk) code = rc;
      row["status"] = to_string(e.result->stop_reason);
      row["unique_clusters_final"] = e.result->unique_clusters_final;
      const auto& h = e.result->loss_history;
      for (std::size_t i = 0; i < h.size(); ++i) {
        csv << format_real(e.alpha) << ',' << i + 1 << ',' << format_real(h[i].total) << '\n';
      }
      std::cout << "alpha=" << format_real(e.alpha) << " stop_reason=" << to_string(e.result->stop_reason)
                << " iterations=" << e.result->iterations_run
                << " clusters=" << e.result->unique_clusters_final << "\n";
    }
    summary.push_back(row);
  }
  write_text(root / "sweep.csv", csv.str());
  write_text(root / "sweep.json", summary.dump(2) + "\n");
  return code;
}

struct SynthOptions {
  std::string spec_path;
  std::string preset;
  int width = 336;
  int height = 256;
  bool evaluate = false;
  double tau = 0.3;
};

int cmd_synth(const SynthOptions& s, const CommonOptions& o) {
  const SceneSpec spec = s.spec_path.empty() ? preset_scene(s.preset, o.config.seed, s.width, s.height)
                                             : load_scene_spec(s.spec_path);
  const TrainConfig config = o.resolved();
  const Scene scene = generate_scene(spec);
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  write_text(dir / "scene.txt", serialize_scene_spec(spec));
  save_pgm(scene.image, dir / "scene.pgm");
  save_png(scene.image, dir / "scene.png");
  save_label_pgm(scene.truth.classes, dir / "truth.pgm");
  save_png(colorize(scene.truth.classes, 4), dir / "truth_rgb.png");
  if (!s.evaluate) return kExitOk;

  const std::string source = s.spec_path.empty() ? "preset:" + s.preset : s.spec_path;
  const auto t0 = std::chrono::steady_clock::now();
  const SegmentationResult r = train(to_tensor(scene.image), config, progress(o.verbose));
  const int code = write_run(dir, scene.image, r, config, {source}, o.invert_gray, seconds_since(t0));

  nlohmann::json metrics{{"tau", s.tau},
                         {"stop_reason", to_string(r.stop_reason)},
                         {"unique_clusters_final", r.unique_clusters_final},
                         {"classes", nlohmann::json::array()}};
  for (const DetectionEntry& e : detection_report(r.final_labels, scene.truth, s.tau)) {
    metrics["classes"].push_back({{"class", to_string(e.fault)},
                                  {"best_cluster", e.best.cluster},
                                  {"iou", e.best.score},
                                  {"detected", e.detected}});
    std::cout << to_string(e.fault) << " iou=" << format_real(e.best.score)
              << " cluster=" << e.best.cluster << " detected=" << (e.detected ? "true" : "false") << "\n";
  }
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Unsupervised feature-clustering segmentation of thermal PV panel images", "pvseg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonOptions seg_opts;
  std::string seg_input;
  auto* seg = app.add_subcommand("segment", "Segment one grayscale image");
  seg->add_option("--input", seg_input, "Input image (8-bit PGM or PNG)")->required();
  add_training_options(seg, seg_opts);

  CommonOptions sweep_opts;
  std::string sweep_input, alpha_text;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Segment one image for several alpha values");
  sweep->add_option("--input", sweep_input, "Input image (8-bit PGM or PNG)")->required();
  sweep->add_option("--alphas", alpha_text, "Comma-separated alpha values, e.g. 1,5,10")->required();
  sweep->add_option("--jobs", jobs, "Concurrent sweep entries")->check(CLI::PositiveNumber)->capture_default_str();
  add_training_options(sweep, sweep_opts);

  CommonOptions synth_opts;
  SynthOptions synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene, optionally segment and score it");
  auto* spec_opt = synth->add_option("--spec", synth_args.spec_path, "Scene spec file (key = value)");
  auto* preset_opt = synth->add_option("--preset", synth_args.preset, "Built-in scene")
                         ->check(CLI::IsMember({"hotspots3", "panels"}));
  spec_opt->excludes(preset_opt);
  synth->add_option("--width", synth_args.width, "Preset width")->capture_default_str();
  synth->add_option("--height", synth_args.height, "Preset height")->capture_default_str();
  synth->add_flag("--evaluate", synth_args.evaluate, "Segment the scene and report fault IoU");
  synth->add_option("--tau", synth_args.tau, "IoU detection threshold")
      ->check(CLI::Validator(
          [](std::string& v) {
            const double t = std::stod(v);
            return t > 0.0 && t <= 1.0 ? std::string() : "must lie in (0, 1]";
          },
          "(0, 1]"))
      ->capture_default_str();
  add_training_options(synth, synth_opts);

  std::vector<char*> argv;
  std::vector<std::string> storage = args.empty() ? std::vector<std::string>{"pvseg"} : args;
  for (auto& a : storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (synth->parsed() && synth_args.spec_path.empty() && synth_args.preset.empty()) {
      throw CLI::RequiredError("one of --spec or --preset");
    }
    if (seg->parsed()) return cmd_segment(seg_input, seg_opts);
    if (sweep->parsed()) return cmd_sweep(sweep_input, alpha_text, jobs, sweep_opts);
    return cmd_synth(synth_args, synth_opts);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* active = seg->parsed() ? seg : sweep->parsed() ? sweep : synth->parsed() ? synth : &app;
    std::cerr << active->help();
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  }
}

}  // namespace pvseg
