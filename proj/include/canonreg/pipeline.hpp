#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "canonreg/dataset.hpp"
#include "canonreg/emd.hpp"
#include "canonreg/eval.hpp"
#include "canonreg/net.hpp"
#include "canonreg/registration.hpp"
#include "canonreg/synthgen.hpp"
#include "canonreg/trainer.hpp"

namespace canonreg {

/// Everything a pipeline run needs: paths, per-module configs, and the root
/// seed that the named substreams (synth, emd, net, train, ransac) hang off.
struct PipelineConfig {
  std::filesystem::path dataset_root = "dataset";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_dir = "reports";

  DatasetParams synth;
  std::size_t emd_k = 3;
  std::size_t emd_samples = 512;
  NetConfig net;
  TrainConfig train;
  std::size_t train_max_points = 2048;  // subsample cap per training cloud; 0 = off
  RansacConfig ransac;
  std::vector<double> rre_thresholds = {10.0, 20.0, 30.0};
  std::vector<double> rte_thresholds = {5.0, 10.0};
  double tau1 = 0.05;  // meters, MatchAcc threshold
  std::size_t n_candidates = 3;
  std::uint64_t seed = 0;
  bool timings = false;  // wall-clock fields make artifacts non-reproducible

  /// Re-derives the per-stage seeds from the root seed.
  void reseed() {
    synth.seed = derive_seed(seed, "synth");
    net.seed = derive_seed(seed, "net");
    train.seed = derive_seed(seed, "train");
    ransac.seed = derive_seed(seed, "ransac");
  }
};

inline void apply_config_json(PipelineConfig& cfg, const Json& j) {
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("dataset_root")) cfg.dataset_root = j.at("dataset_root").get<std::string>();
  if (j.contains("checkpoint_dir")) cfg.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
  if (j.contains("report_dir")) cfg.report_dir = j.at("report_dir").get<std::string>();
  if (j.contains("timings")) cfg.timings = j.at("timings").get<bool>();
  if (j.contains("synth")) {
    const Json& s = j.at("synth");
    if (s.contains("n_models")) cfg.synth.n_models = s.at("n_models").get<std::size_t>();
    if (s.contains("n_views")) cfg.synth.n_views = s.at("n_views").get<std::size_t>();
    if (s.contains("train_fraction")) cfg.synth.train_fraction = s.at("train_fraction").get<double>();
    if (s.contains("n_points")) cfg.synth.n_points = s.at("n_points").get<std::size_t>();
    if (s.contains("jitter_sigma")) cfg.synth.jitter_sigma = s.at("jitter_sigma").get<double>();
    if (s.contains("placement_range")) cfg.synth.placement_range = s.at("placement_range").get<double>();
  }
  if (j.contains("emd")) {
    const Json& s = j.at("emd");
    if (s.contains("k")) cfg.emd_k = s.at("k").get<std::size_t>();
    if (s.contains("samples")) cfg.emd_samples = s.at("samples").get<std::size_t>();
  }
  if (j.contains("net")) {
    const Json& s = j.at("net");
    if (s.contains("voxel")) cfg.net.voxel = s.at("voxel").get<double>();
    if (s.contains("feature_dim")) cfg.net.feature_dim = s.at("feature_dim").get<int>();
    if (s.contains("enc_channels")) cfg.net.enc_channels = s.at("enc_channels").get<int>();
    if (s.contains("bottleneck_channels"))
      cfg.net.bottleneck_channels = s.at("bottleneck_channels").get<int>();
    if (s.contains("bias")) cfg.net.bias = s.at("bias").get<bool>();
  }
  if (j.contains("train")) {
    const Json& s = j.at("train");
    TrainConfig& t = cfg.train;
    if (s.contains("p_pos")) t.p_pos = s.at("p_pos").get<double>();
    if (s.contains("p_neg")) t.p_neg = s.at("p_neg").get<double>();
    if (s.contains("learning_rate")) t.learning_rate = s.at("learning_rate").get<double>();
    if (s.contains("momentum")) t.momentum = s.at("momentum").get<double>();
    if (s.contains("lr_decay")) t.lr_decay = s.at("lr_decay").get<double>();
    if (s.contains("lr_decay_every")) t.lr_decay_every = s.at("lr_decay_every").get<int>();
    if (s.contains("epochs_per_phase")) t.epochs_per_phase = s.at("epochs_per_phase").get<std::vector<int>>();
    if (s.contains("n_pos")) t.n_pos = s.at("n_pos").get<std::size_t>();
    if (s.contains("n_neg")) t.n_neg = s.at("n_neg").get<std::size_t>();
    if (s.contains("tau_same")) t.tau_same = s.at("tau_same").get<double>();
    if (s.contains("tau_cross")) t.tau_cross = s.at("tau_cross").get<double>();
    if (s.contains("negative_margin")) t.negative_margin = s.at("negative_margin").get<double>();
    if (s.contains("hinged")) t.hinged = s.at("hinged").get<bool>();
    if (s.contains("steps_per_model")) t.steps_per_model = s.at("steps_per_model").get<int>();
    if (s.contains("max_points")) cfg.train_max_points = s.at("max_points").get<std::size_t>();
  }
  if (j.contains("ransac")) {
    const Json& s = j.at("ransac");
    if (s.contains("sample_size")) cfg.ransac.sample_size = s.at("sample_size").get<int>();
    if (s.contains("max_iterations")) cfg.ransac.max_iterations = s.at("max_iterations").get<int>();
    if (s.contains("inlier_threshold")) cfg.ransac.inlier_threshold = s.at("inlier_threshold").get<double>();
    if (s.contains("confidence")) cfg.ransac.confidence = s.at("confidence").get<double>();
    if (s.contains("mutual_check")) cfg.ransac.mutual_check = s.at("mutual_check").get<bool>();
  }
  if (j.contains("eval")) {
    const Json& s = j.at("eval");
    if (s.contains("rre_thresholds")) cfg.rre_thresholds = s.at("rre_thresholds").get<std::vector<double>>();
    if (s.contains("rte_thresholds")) cfg.rte_thresholds = s.at("rte_thresholds").get<std::vector<double>>();
    if (s.contains("tau1")) cfg.tau1 = s.at("tau1").get<double>();
    if (s.contains("n_candidates")) cfg.n_candidates = s.at("n_candidates").get<std::size_t>();
  }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline DatasetIndex cmd_synth(const PipelineConfig& cfg) {
  return make_dataset(cfg.dataset_root, cfg.synth);
}

// ---------------------------------------------------------------------------
// annotate: EMD k-nearest neighbors; test models restricted to the train split
// ---------------------------------------------------------------------------

inline NeighborGraph annotate_dataset(const LoadedDataset& ds, std::size_t k, std::size_t n_samples,
                                      std::uint64_t seed) {
  require(ds.train_ids.size() >= k + 1, ErrorCode::BadParameter,
          "need at least k+1 training models for k neighbors");

  std::vector<std::string> ids = ds.train_ids;
  ids.insert(ids.end(), ds.test_ids.begin(), ds.test_ids.end());
  std::map<std::string, PointCloud> sampled;
  for (const auto& id : ids) {
    Rng rng(seed);
    sampled[id] = sample_points(to_ncc(ds.models.at(id).canonical), n_samples, rng);
  }

  // Queries pair with the training pool only.
  std::vector<std::pair<std::string, std::string>> tasks;
  for (const auto& q : ids)
    for (const auto& p : ds.train_ids)
      if (q < p || (!ds.is_train(q) && q != p)) tasks.emplace_back(q, p);

  std::map<std::pair<std::string, std::string>, double> dist;
  std::vector<double> values(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t t) {
    values[t] = emd_exact(sampled.at(tasks[t].first), sampled.at(tasks[t].second));
  });
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    dist[{tasks[t].first, tasks[t].second}] = values[t];
    dist[{tasks[t].second, tasks[t].first}] = values[t];
  }

  NeighborGraph graph;
  graph.seed = seed;
  graph.n_samples = n_samples;
  for (const auto& q : ids) {
    std::vector<NeighborEntry> entries;
    for (const auto& p : ds.train_ids) {
      if (p == q) continue;
      entries.push_back({p, dist.at({q, p})});
    }
    std::sort(entries.begin(), entries.end(), [](const NeighborEntry& a, const NeighborEntry& b) {
      return a.emd != b.emd ? a.emd < b.emd : a.id < b.id;
    });
    entries.resize(std::min(entries.size(), k));
    graph.neighbors[q] = std::move(entries);
  }
  return graph;
}

inline std::filesystem::path cmd_annotate(const PipelineConfig& cfg) {
  LoadedDataset ds = load_dataset(cfg.dataset_root, /*with_views=*/false);
  NeighborGraph graph = annotate_dataset(ds, cfg.emd_k, cfg.emd_samples, derive_seed(cfg.seed, "emd"));
  std::filesystem::path out = cfg.dataset_root / "neighbors.json";
  write_json(out, neighbor_graph_to_json(graph));
  return out;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOutputs {
  std::vector<std::filesystem::path> checkpoints;  // one per phase
  std::filesystem::path loss_csv;
};

inline std::filesystem::path phase_checkpoint_path(const PipelineConfig& cfg, int phase_idx) {
  return cfg.checkpoint_dir / ("phase" + std::to_string(phase_idx + 1) + ".ckpt");
}

/// Two-phase curriculum; a checkpoint lands after each phase so the
/// with/without-cross-instance comparison can be made later. resume_from
/// skips the first `resume_phases` phases and starts from that checkpoint.
inline TrainOutputs cmd_train(const PipelineConfig& cfg, int resume_phases = 0) {
  std::filesystem::path neighbors_path = cfg.dataset_root / "neighbors.json";
  require(std::filesystem::exists(neighbors_path), ErrorCode::ConfigError,
          "missing neighbors.json; run annotate first");
  LoadedDataset ds = load_dataset(cfg.dataset_root);
  NeighborGraph graph = neighbor_graph_from_json(read_json(neighbors_path));
  TrainingSet set = build_training_set(ds, graph, cfg.train_max_points, derive_seed(cfg.seed, "trainpts"));

  std::vector<CurriculumPhase> schedule = default_schedule();
  require(resume_phases >= 0 && resume_phases < static_cast<int>(schedule.size()),
          ErrorCode::BadParameter, "resume phase out of range");

  FeatureNet net;
  NetConfig net_cfg = cfg.net;
  net_cfg.seed = derive_seed(cfg.seed, "net");
  if (resume_phases == 0) {
    net = make_feature_net(net_cfg);
  } else {
    std::filesystem::path prev = phase_checkpoint_path(cfg, resume_phases - 1);
    require(std::filesystem::exists(prev), ErrorCode::ConfigError,
            "cannot resume, missing checkpoint: " + prev.string());
    net = load_checkpoint(prev);
  }

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = derive_seed(cfg.seed, "train");
  std::vector<CurriculumPhase> remaining(schedule.begin() + resume_phases, schedule.end());
  std::vector<int> epochs(train_cfg.epochs_per_phase.begin() +
                              std::min<std::size_t>(resume_phases, train_cfg.epochs_per_phase.size()),
                          train_cfg.epochs_per_phase.end());
  train_cfg.epochs_per_phase = epochs;

  TrainOutputs outputs;
  TrainResult result = train(set, std::move(net), remaining, train_cfg,
                             [&](int phase_idx, const FeatureNet& snapshot) {
                               std::filesystem::path path =
                                   phase_checkpoint_path(cfg, phase_idx + resume_phases);
                               save_checkpoint(path, snapshot);
                               outputs.checkpoints.push_back(path);
                             });
  outputs.loss_csv = cfg.checkpoint_dir / "loss_history.csv";
  write_text_file(outputs.loss_csv, loss_history_csv(result.history));
  return outputs;
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

inline std::string features_csv(const FeatureSet& fs) {
  std::ostringstream out;
  for (Eigen::Index r = 0; r < fs.features.rows(); ++r) {
    for (Eigen::Index c = 0; c < fs.features.cols(); ++c) {
      if (c) out << ',';
      out << format_double(fs.features(r, c));
    }
    out << '\n';
  }
  return out.str();
}

/// Features for one cloud. With an annotation the cloud is NCC-normalized by
/// its pose/scale; otherwise it is treated as a model in canonical pose.
inline FeatureSet extract_features(const FeatureNet& net, const PointCloud& cloud,
                                   const std::optional<PosedCloud>& posed) {
  PointCloud ncc = posed ? to_ncc(*posed) : to_ncc(canonical_posed(cloud));
  return net_forward(net, ncc);
}

inline void cmd_extract(const PipelineConfig& /*cfg*/, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& cloud_path,
                        const std::optional<std::filesystem::path>& annotation_path,
                        const std::filesystem::path& out_path) {
  require(std::filesystem::exists(checkpoint), ErrorCode::ConfigError,
          "missing checkpoint: " + checkpoint.string());
  FeatureNet net = load_checkpoint(checkpoint);
  PointCloud cloud = read_ply(cloud_path);
  std::optional<PosedCloud> posed;
  if (annotation_path) {
    Json ann = read_json(*annotation_path);
    posed = PosedCloud{cloud, transform_from_json(ann), ann.at("scale").get<double>()};
  }
  write_text_file(out_path, features_csv(extract_features(net, cloud, posed)));
}

// ---------------------------------------------------------------------------
// register
// ---------------------------------------------------------------------------

struct RegisterCase {
  std::string view_name;
  std::string chosen_id;
  RegistrationResult registration;
  double match_acc = 0.0;
  double rre_rad = 0.0;
  double rte_m = 0.0;
  double runtime_ms = 0.0;
};

/// Ground-truth transform for a view: world frame -> source model's canonical
/// metric frame. The candidates share that canonical frame by convention.
inline RigidTransform ground_truth_transform(const LoadedDataset& ds, const LoadedView& view) {
  const LoadedModel& source = ds.models.at(view.model_id);
  RigidTransform placement = compose(view.posed.pose, invert(source.canonical.pose));
  return invert(placement);
}

inline RegisterCase register_view(const PipelineConfig& cfg, const LoadedDataset& ds,
                                  const FeatureNet& net, const LoadedView& view,
                                  const std::vector<std::string>& candidate_ids) {
  require(!candidate_ids.empty(), ErrorCode::BadParameter, "no candidate ids given");
  auto t0 = std::chrono::steady_clock::now();

  FeatureSet fx = net_forward(net, to_ncc(view.posed));
  std::vector<Candidate> candidates;
  candidates.reserve(candidate_ids.size());
  for (const auto& id : candidate_ids) {
    require(ds.models.count(id) > 0, ErrorCode::ConfigError, "unknown candidate model: " + id);
    const LoadedModel& m = ds.models.at(id);
    Candidate c;
    c.id = id;
    c.cloud = m.cloud;
    c.features = net_forward(net, to_ncc(m.canonical));
    candidates.push_back(std::move(c));
  }

  RansacConfig ransac_cfg = cfg.ransac;
  ransac_cfg.seed = derive_seed(derive_seed(cfg.seed, "ransac"), view.name);
  SelectionResult sel = select_model(view.posed.cloud, candidates, fx, ransac_cfg);

  RegisterCase out;
  out.view_name = view.name;
  out.chosen_id = sel.id;
  out.registration = sel.registration;

  RigidTransform gt = ground_truth_transform(ds, view);
  const Candidate* chosen = nullptr;
  for (const auto& c : candidates)
    if (c.id == sel.id) chosen = &c;
  out.match_acc = match_accuracy(view.posed.cloud, chosen->cloud, sel.correspondences, gt, cfg.tau1);
  out.rre_rad = rre(sel.registration.transform.rotation, gt.rotation);
  out.rte_m = rte(sel.registration.transform.translation, gt.translation);
  out.runtime_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline Json register_case_json(const PipelineConfig& cfg, const RegisterCase& c) {
  Json j;
  j["view"] = c.view_name;
  j["chosen_id"] = c.chosen_id;
  j["transform"] = transform_to_json(c.registration.transform);
  j["inlier_count"] = c.registration.inlier_count;
  j["inlier_ratio"] = c.registration.inlier_ratio;
  j["rmse"] = c.registration.rmse;
  j["match_acc"] = c.match_acc;
  j["rre_deg"] = c.rre_rad * kRadToDeg;
  j["rte_m"] = c.rte_m;
  j["seed"] = cfg.seed;
  if (cfg.timings) j["runtime_ms"] = c.runtime_ms;
  return j;
}

/// Neighbor candidates of the view's source model, restricted by annotate to
/// the training split.
inline std::vector<std::string> default_candidates(const NeighborGraph& graph,
                                                   const std::string& model_id, std::size_t n) {
  auto it = graph.neighbors.find(model_id);
  require(it != graph.neighbors.end(), ErrorCode::ConfigError,
          "neighbors.json does not cover model " + model_id);
  std::vector<std::string> ids;
  for (const auto& e : it->second) {
    ids.push_back(e.id);
    if (ids.size() >= n) break;
  }
  return ids;
}

inline std::filesystem::path results_dir(const PipelineConfig& cfg,
                                         const std::filesystem::path& checkpoint) {
  return cfg.report_dir / "results" / checkpoint.stem().string();
}

inline RegisterCase cmd_register(const PipelineConfig& cfg, const std::filesystem::path& checkpoint,
                                 const std::string& view, std::vector<std::string> candidate_ids) {
  require(std::filesystem::exists(checkpoint), ErrorCode::ConfigError,
          "missing checkpoint: " + checkpoint.string());
  FeatureNet net = load_checkpoint(checkpoint);
  LoadedDataset ds = load_dataset(cfg.dataset_root, /*with_views=*/false);
  LoadedView lv = load_view(cfg.dataset_root, view);
  if (candidate_ids.empty()) {
    NeighborGraph graph = neighbor_graph_from_json(read_json(cfg.dataset_root / "neighbors.json"));
    candidate_ids = default_candidates(graph, lv.model_id, cfg.n_candidates);
  }
  RegisterCase c = register_view(cfg, ds, net, lv, candidate_ids);
  write_json(results_dir(cfg, checkpoint) / (view + ".json"), register_case_json(cfg, c));
  return c;
}

/// Registers every view of the test split against its neighbor candidates.
inline std::vector<RegisterCase> cmd_register_all(const PipelineConfig& cfg,
                                                  const std::filesystem::path& checkpoint) {
  require(std::filesystem::exists(checkpoint), ErrorCode::ConfigError,
          "missing checkpoint: " + checkpoint.string());
  FeatureNet net = load_checkpoint(checkpoint);
  LoadedDataset ds = load_dataset(cfg.dataset_root);
  NeighborGraph graph = neighbor_graph_from_json(read_json(cfg.dataset_root / "neighbors.json"));

  std::vector<RegisterCase> cases;
  for (const auto& id : ds.test_ids) {
    std::vector<std::string> candidates = default_candidates(graph, id, cfg.n_candidates);
    for (const LoadedView* view : ds.views_of(id)) {
      RegisterCase c = register_view(cfg, ds, net, *view, candidates);
      write_json(results_dir(cfg, checkpoint) / (view->name + ".json"), register_case_json(cfg, c));
      cases.push_back(std::move(c));
    }
  }
  return cases;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline std::vector<EvalRecord> load_eval_records(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::InsufficientPairs,
          "no registration results under " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorCode::InsufficientPairs, "no registration results under " + dir.string());

  std::vector<EvalRecord> records;
  for (const auto& f : files) {
    Json j = read_json(f);
    EvalRecord r;
    r.case_id = j.at("view").get<std::string>();
    r.match_acc = j.at("match_acc").get<double>();
    r.rre_rad = j.at("rre_deg").get<double>() / kRadToDeg;
    r.rte_m = j.at("rte_m").get<double>();
    r.inlier_ratio = j.at("inlier_ratio").get<double>();
    if (j.contains("runtime_ms")) r.runtime_ms = j.at("runtime_ms").get<double>();
    records.push_back(std::move(r));
  }
  return records;
}

struct EvalOutputs {
  std::vector<std::pair<std::string, ThresholdTable>> tables;  // tag -> table
  std::filesystem::path table_txt;
};

/// Aggregates the per-case results of each registered checkpoint tag into a
/// CSV and a shared percent-within-threshold table.
inline EvalOutputs cmd_eval(const PipelineConfig& cfg) {
  std::filesystem::path base = cfg.report_dir / "results";
  require(std::filesystem::is_directory(base), ErrorCode::InsufficientPairs,
          "no registration results under " + base.string());
  std::vector<std::filesystem::path> tags;
  for (const auto& entry : std::filesystem::directory_iterator(base))
    if (entry.is_directory()) tags.push_back(entry.path());
  std::sort(tags.begin(), tags.end());
  require(!tags.empty(), ErrorCode::InsufficientPairs, "no registration results to evaluate");

  EvalOutputs out;
  for (const auto& tag_dir : tags) {
    std::string tag = tag_dir.filename().string();
    std::vector<EvalRecord> records = load_eval_records(tag_dir);
    write_text_file(cfg.report_dir / ("eval_" + tag + ".csv"), eval_records_csv(records));
    out.tables.emplace_back(tag, threshold_table(records, cfg.rre_thresholds, cfg.rte_thresholds));
  }
  out.table_txt = cfg.report_dir / "threshold_table.txt";
  write_text_file(out.table_txt, render_threshold_table(out.tables));
  return out;
}

}  // namespace canonreg
