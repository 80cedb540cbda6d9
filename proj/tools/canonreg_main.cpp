// canonreg: category-level point cloud registration pipeline.
//
// Subcommands: synth, annotate, train, extract, register, eval.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "canonreg/pipeline.hpp"

using namespace canonreg;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dataset_root;
  std::optional<std::string> checkpoint_dir;
  std::optional<std::string> report_dir;
  bool timings = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file; flags override it");
  cmd->add_option("--seed", flags.seed, "root seed; stages draw named substreams from it");
  cmd->add_option("--dataset", flags.dataset_root, "dataset root directory");
  cmd->add_option("--checkpoints", flags.checkpoint_dir, "checkpoint directory");
  cmd->add_option("--reports", flags.report_dir, "report directory");
  cmd->add_flag("--timings", flags.timings, "include wall-clock timings in artifacts (breaks byte reproducibility)");
}

PipelineConfig build_config(const CommonFlags& flags) {
  PipelineConfig cfg;
  if (!flags.config_path.empty()) apply_config_json(cfg, read_json(flags.config_path));
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.dataset_root) cfg.dataset_root = *flags.dataset_root;
  if (flags.checkpoint_dir) cfg.checkpoint_dir = *flags.checkpoint_dir;
  if (flags.report_dir) cfg.report_dir = *flags.report_dir;
  cfg.timings = cfg.timings || flags.timings;
  cfg.reseed();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"canonreg: category-level point cloud registration"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::optional<std::size_t> opt_models, opt_views, opt_points, opt_emd_samples, opt_emd_k;
  std::optional<double> opt_split, opt_jitter, opt_inlier_thresh;
  std::optional<int> opt_ransac_iters;
  std::vector<int> opt_epochs;
  std::string arg_view, arg_input, arg_annotation, arg_output, arg_checkpoint;
  std::vector<std::string> arg_candidates;
  bool flag_resume = false, flag_all = false;

  CLI::App* synth = app.add_subcommand("synth", "generate the synthetic chair dataset");
  add_common(synth, flags);
  synth->add_option("--models", opt_models, "number of models");
  synth->add_option("--views", opt_views, "views per model");
  synth->add_option("--points", opt_points, "points per model");
  synth->add_option("--split", opt_split, "train fraction");
  synth->add_option("--jitter", opt_jitter, "Gaussian view noise sigma in meters");

  CLI::App* annotate = app.add_subcommand("annotate", "EMD nearest-neighbor annotation");
  add_common(annotate, flags);
  annotate->add_option("--emd-samples", opt_emd_samples, "points sampled per model for EMD");
  annotate->add_option("--emd-k", opt_emd_k, "neighbors per model");

  CLI::App* train_cmd = app.add_subcommand("train", "two-phase curriculum training");
  add_common(train_cmd, flags);
  train_cmd->add_option("--epochs", opt_epochs, "epochs per phase (two values)")->expected(1, 2);
  train_cmd->add_flag("--resume", flag_resume, "resume from phase1.ckpt and run phase 2 only");

  CLI::App* extract = app.add_subcommand("extract", "dump per-point features for one cloud");
  add_common(extract, flags);
  extract->add_option("--checkpoint", arg_checkpoint, "checkpoint file (default phase2.ckpt)");
  extract->add_option("--input", arg_input, "input PLY")->required();
  extract->add_option("--annotation", arg_annotation, "pose/scale annotation JSON (else canonical)");
  extract->add_option("--output", arg_output, "output CSV")->required();

  CLI::App* reg = app.add_subcommand("register", "register observation(s) against candidates");
  add_common(reg, flags);
  reg->add_option("--checkpoint", arg_checkpoint, "checkpoint file (default phase2.ckpt)");
  reg->add_option("--view", arg_view, "view name, e.g. m028_03");
  reg->add_option("--candidates", arg_candidates, "candidate model ids (default: EMD neighbors)");
  reg->add_flag("--all", flag_all, "register every view of the test split");
  reg->add_option("--ransac-iters", opt_ransac_iters, "RANSAC iteration budget");
  reg->add_option("--inlier-thresh", opt_inlier_thresh, "RANSAC inlier threshold in meters");

  CLI::App* eval_cmd = app.add_subcommand("eval", "aggregate registration results into tables");
  add_common(eval_cmd, flags);
  std::vector<double> opt_rre_thresholds, opt_rte_thresholds;
  eval_cmd->add_option("--thresholds", opt_rre_thresholds, "RRE thresholds in degrees");
  eval_cmd->add_option("--rte-thresholds", opt_rte_thresholds, "RTE thresholds in cm");

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg = build_config(flags);

    if (synth->parsed()) {
      if (opt_models) cfg.synth.n_models = *opt_models;
      if (opt_views) cfg.synth.n_views = *opt_views;
      if (opt_points) cfg.synth.n_points = *opt_points;
      if (opt_split) cfg.synth.train_fraction = *opt_split;
      if (opt_jitter) cfg.synth.jitter_sigma = *opt_jitter;
      cfg.reseed();
      DatasetIndex index = cmd_synth(cfg);
      std::cout << "wrote " << index.model_ids.size() << " models ("
                << index.train_ids.size() << " train / " << index.test_ids.size() << " test), "
                << index.model_ids.size() * cfg.synth.n_views << " views to " << cfg.dataset_root
                << "\n";
    } else if (annotate->parsed()) {
      if (opt_emd_samples) cfg.emd_samples = *opt_emd_samples;
      if (opt_emd_k) cfg.emd_k = *opt_emd_k;
      auto path = cmd_annotate(cfg);
      std::cout << "wrote " << path << "\n";
    } else if (train_cmd->parsed()) {
      if (!opt_epochs.empty()) cfg.train.epochs_per_phase = opt_epochs;
      TrainOutputs out = cmd_train(cfg, flag_resume ? 1 : 0);
      for (const auto& ckpt : out.checkpoints) std::cout << "wrote " << ckpt << "\n";
      std::cout << "wrote " << out.loss_csv << "\n";
    } else if (extract->parsed()) {
      std::filesystem::path ckpt =
          arg_checkpoint.empty() ? phase_checkpoint_path(cfg, 1) : std::filesystem::path(arg_checkpoint);
      std::optional<std::filesystem::path> ann;
      if (!arg_annotation.empty()) ann = arg_annotation;
      cmd_extract(cfg, ckpt, arg_input, ann, arg_output);
      std::cout << "wrote " << arg_output << "\n";
    } else if (reg->parsed()) {
      if (opt_ransac_iters) cfg.ransac.max_iterations = *opt_ransac_iters;
      if (opt_inlier_thresh) cfg.ransac.inlier_threshold = *opt_inlier_thresh;
      std::filesystem::path ckpt =
          arg_checkpoint.empty() ? phase_checkpoint_path(cfg, 1) : std::filesystem::path(arg_checkpoint);
      if (flag_all) {
        auto cases = cmd_register_all(cfg, ckpt);
        std::cout << "registered " << cases.size() << " test views with " << ckpt.stem().string()
                  << "\n";
      } else {
        require(!arg_view.empty(), ErrorCode::ConfigError, "register needs --view or --all");
        RegisterCase c = cmd_register(cfg, ckpt, arg_view, arg_candidates);
        std::cout << c.view_name << ": chose " << c.chosen_id << ", inlier ratio "
                  << c.registration.inlier_ratio << ", RRE " << c.rre_rad * kRadToDeg << " deg, RTE "
                  << c.rte_m << " m\n";
      }
    } else if (eval_cmd->parsed()) {
      if (!opt_rre_thresholds.empty()) cfg.rre_thresholds = opt_rre_thresholds;
      if (!opt_rte_thresholds.empty()) cfg.rte_thresholds = opt_rte_thresholds;
      EvalOutputs out = cmd_eval(cfg);
      std::cout << read_text_file(out.table_txt);
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return error_exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
