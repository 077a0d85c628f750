#include <CLI11.hpp>
#include <iostream>
#include <numbers>

#include "dist/errors.hpp"
#include "dist/io.hpp"

namespace {

using namespace dist;

struct CommonArgs {
  std::string manifest;
  std::string config;
  std::string out_dir = ".";
  std::string field;
  std::string cv;
  std::string stage;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double h = 0.0;
  bool h_set = false;
  double angle_gate_deg = 0.0;
  bool gate_set = false;
  int max_skip = -1;
  int grid_level = -1;
  double fa_threshold = -1.0;
  int longest = -1;
  int threads = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_field) {
  cmd->add_option("--manifest", args.manifest, "dataset manifest path")->required();
  cmd->add_option("--config", args.config, "JSON config file");
  cmd->add_option("--out-dir", args.out_dir, "output directory");
  if (needs_field) {
    cmd->add_option("--field", args.field, "direction field file")->required();
  }
  cmd->add_option("--seed", args.seed, "rng seed")->each([&](const std::string&) {
    args.seed_set = true;
  });
  cmd->add_option("--h", args.h, "smoothing bandwidth, mm")->each([&](const std::string&) {
    args.h_set = true;
  });
  cmd->add_option("--cv", args.cv, "bandwidth selection: ocv, mcv, tcv or none");
  cmd->add_option("--angle-gate-deg", args.angle_gate_deg, "tracking angle gate, degrees")
      ->each([&](const std::string&) { args.gate_set = true; });
  cmd->add_option("--max-skip", args.max_skip, "voxels a tract may skip");
  cmd->add_option("--grid-level", args.grid_level, "icosphere subdivision level (0..3)");
  cmd->add_option("--fa-threshold", args.fa_threshold, "FA screen threshold");
  cmd->add_option("--longest", args.longest, "keep only the N longest tracts");
  cmd->add_option("--threads", args.threads, "worker threads (0 = hardware)");
  cmd->add_option("--stage", args.stage, "run the pipeline through this stage only");
}

// precedence: CLI flags > config file > defaults
PipelineConfig resolve_config(const CommonArgs& args) {
  PipelineConfig cfg;
  if (!args.config.empty()) cfg = read_config(args.config, cfg);
  if (args.seed_set) cfg.seed = args.seed;
  if (args.h_set) {
    cfg.smoothing.h = args.h;
    cfg.smoothing.cv = CvMode::none;
  }
  if (!args.cv.empty()) {
    if (args.cv == "none") {
      cfg.smoothing.cv = CvMode::none;
    } else if (args.cv == "ocv") {
      cfg.smoothing.cv = CvMode::ocv;
    } else if (args.cv == "mcv") {
      cfg.smoothing.cv = CvMode::mcv;
    } else if (args.cv == "tcv") {
      cfg.smoothing.cv = CvMode::tcv;
    } else {
      throw InputError("unknown --cv value '" + args.cv + "'");
    }
  }
  if (args.gate_set) cfg.tracking.angle_gate = args.angle_gate_deg * std::numbers::pi / 180.0;
  if (args.max_skip >= 0) cfg.tracking.max_skip = args.max_skip;
  if (args.grid_level >= 0) cfg.fit.grid_level = args.grid_level;
  if (args.fa_threshold >= 0.0) cfg.fit.fa_threshold = args.fa_threshold;
  if (args.longest >= 0) cfg.longest = args.longest;
  if (args.threads >= 0) cfg.threads = args.threads;
  if (!args.stage.empty()) cfg.stage = parse_stage(args.stage);
  return cfg;
}

int run_simulate(const std::string& phantom, const std::string& out_dir, std::uint64_t seed) {
  const PhantomSpec spec = make_phantom(phantom, seed);
  const Dataset data = generate(spec);
  write_dataset(out_dir, data, spec);
  std::cout << "wrote phantom " << phantom << " (" << data.grid.num_voxels() << " voxels) to "
            << out_dir << "\n";
  return 0;
}

int run_smooth(const CommonArgs& args) {
  const PipelineConfig cfg = resolve_config(args);
  const LoadedDataset data = read_dataset(args.manifest);
  auto [field, counts] = read_field(args.field, data.grid);

  SmoothingConfig smoothing = cfg.smoothing;
  if (smoothing.h_grid.empty()) {
    const double vs = data.grid.voxel_size.mean();
    for (int i = 0; i < 8; ++i) {
      smoothing.h_grid.push_back(0.5 * vs * std::pow(8.0, i / 7.0));
    }
  }
  if (smoothing.cv != CvMode::none && field.by_voxel().size() >= 2) {
    const CvResult cv = cv_bandwidth(field, smoothing.h_grid, smoothing.cv, smoothing);
    smoothing.h = cv.h;
    std::cout << "cv-selected h = " << cv.h << " mm\n";
  }
  const DirectionField smoothed = smooth_field(field, smoothing);
  fs::create_directories(args.out_dir);
  write_field(fs::path(args.out_dir) / "field_smoothed.txt", smoothed, data.grid);
  std::cout << "smoothed " << field.by_voxel().size() << " voxels (h = " << smoothing.h
            << " mm)\n";
  return 0;
}

int run_track(const CommonArgs& args) {
  const PipelineConfig cfg = resolve_config(args);
  const LoadedDataset data = read_dataset(args.manifest);
  auto [field, counts] = read_field(args.field, data.grid);
  std::vector<Tract> tracts = track_all(field, data.grid, cfg.tracking);
  if (cfg.longest > 0 && static_cast<int>(tracts.size()) > cfg.longest) {
    tracts.resize(cfg.longest);
  }
  fs::create_directories(args.out_dir);
  write_tracts(fs::path(args.out_dir) / "tracts.txt", tracts);
  emit_plot_tracts(fs::path(args.out_dir) / "plot_tracts.tsv", tracts);
  std::cout << "wrote " << tracts.size() << " tracts\n";
  return 0;
}

int run_eval(const CommonArgs& args) {
  const LoadedDataset data = read_dataset(args.manifest);
  if (!data.truth.has_value()) {
    throw InputError("eval: manifest has no truth_path");
  }
  auto [field, counts] = read_field(args.field, data.grid);
  const EvalReport report =
      evaluate_field(field, counts, *data.truth, data.truth_counts, data.grid);
  fs::create_directories(args.out_dir);
  write_eval_report(fs::path(args.out_dir) / "eval.json", report);
  std::cout << "mean error " << report.mean_error_deg << " deg, median "
            << report.median_error_deg << " deg, misses " << report.misses << ", extras "
            << report.extras << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiST: diffusion direction estimation, smoothing and tracking"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print help");

  std::string phantom = "P3";
  CommonArgs sim_args, fit_args, smooth_args, track_args, eval_args, pipe_args;

  CLI::App* sim = app.add_subcommand("simulate", "generate a synthetic phantom dataset");
  sim->add_option("--phantom", phantom, "P1..P6");
  sim->add_option("--out-dir", sim_args.out_dir, "output directory")->required();
  sim->add_option("--seed", sim_args.seed, "rng seed")->each([&](const std::string&) {
    sim_args.seed_set = true;
  });

  CLI::App* fit = app.add_subcommand("fit", "voxel-wise direction estimation");
  add_common(fit, fit_args, false);

  CLI::App* smooth = app.add_subcommand("smooth", "smooth a direction field");
  add_common(smooth, smooth_args, true);

  CLI::App* track = app.add_subcommand("track", "fiber tracking over a direction field");
  add_common(track, track_args, true);

  CLI::App* eval = app.add_subcommand("eval", "compare a field against ground truth");
  add_common(eval, eval_args, true);

  CLI::App* pipe = app.add_subcommand("pipeline", "full run: fit, smooth, track, eval");
  add_common(pipe, pipe_args, false);

  try {
    app.parse(argc, argv);
    if (sim->parsed()) {
      return run_simulate(phantom, sim_args.out_dir, sim_args.seed_set ? sim_args.seed : 1);
    }
    if (fit->parsed()) {
      PipelineConfig cfg = resolve_config(fit_args);
      cfg.stage = PipelineStage::fit;
      const PipelineResult r = run_pipeline(fit_args.manifest, cfg, fit_args.out_dir);
      std::cout << "fitted " << r.fitted_voxels << " voxels (pooled sigma " << r.pooled_sigma
                << ")\n";
      return 0;
    }
    if (smooth->parsed()) return run_smooth(smooth_args);
    if (track->parsed()) return run_track(track_args);
    if (eval->parsed()) return run_eval(eval_args);
    if (pipe->parsed()) {
      const PipelineConfig cfg = resolve_config(pipe_args);
      const PipelineResult r = run_pipeline(pipe_args.manifest, cfg, pipe_args.out_dir);
      std::cout << "pipeline done: " << r.fitted_voxels << " voxels fitted, " << r.tract_count
                << " tracts, pooled sigma " << r.pooled_sigma << ", h " << r.cv_h << " mm\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(dist::ExitCode::input_error);
  } catch (const dist::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return static_cast<int>(dist::ExitCode::input_error);
  } catch (const std::invalid_argument& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return static_cast<int>(dist::ExitCode::input_error);
  } catch (const std::domain_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return static_cast<int>(dist::ExitCode::input_error);
  } catch (const dist::ConvergenceError& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return static_cast<int>(dist::ExitCode::convergence_error);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(dist::ExitCode::internal_error);
  }
  return 0;
}
