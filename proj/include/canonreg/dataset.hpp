#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "canonreg/io.hpp"
#include "canonreg/synthgen.hpp"
#include "canonreg/trainer.hpp"

namespace canonreg {

struct LoadedModel {
  std::string id;
  PointCloud cloud;      // canonical pose, metric
  PosedCloud canonical;  // annotation recovering NCC
};

struct LoadedView {
  std::string name;  // <model>_<view>
  std::string model_id;
  std::size_t view_index = 0;
  PosedCloud posed;  // world cloud + ground-truth pose/scale
};

struct LoadedDataset {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::map<std::string, LoadedModel> models;
  std::vector<LoadedView> views;

  bool is_train(const std::string& id) const {
    return std::find(train_ids.begin(), train_ids.end(), id) != train_ids.end();
  }

  std::vector<const LoadedView*> views_of(const std::string& model_id) const {
    std::vector<const LoadedView*> out;
    for (const auto& v : views)
      if (v.model_id == model_id) out.push_back(&v);
    return out;
  }
};

inline LoadedView load_view(const std::filesystem::path& root, const std::string& name) {
  LoadedView view;
  view.name = name;
  view.posed.cloud = read_ply(root / "views" / (name + ".ply"));
  Json ann = read_json(root / "annotations" / (name + ".json"));
  view.model_id = ann.at("model_id").get<std::string>();
  view.view_index = ann.at("view_index").get<std::size_t>();
  view.posed.pose = transform_from_json(ann);
  view.posed.scale = ann.at("scale").get<double>();
  return view;
}

inline LoadedDataset load_dataset(const std::filesystem::path& root, bool with_views = true) {
  LoadedDataset ds;
  ds.root = root;
  std::filesystem::path manifest_path = root / "manifest.json";
  require(std::filesystem::exists(manifest_path), ErrorCode::ConfigError,
          "missing dataset manifest: " + manifest_path.string());
  Json manifest = read_json(manifest_path);
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.train_ids = manifest.at("train").get<std::vector<std::string>>();
  ds.test_ids = manifest.at("test").get<std::vector<std::string>>();
  std::size_t n_views = manifest.at("n_views").get<std::size_t>();

  auto load_model = [&](const std::string& id) {
    LoadedModel m;
    m.id = id;
    m.cloud = read_ply(root / "models" / (id + ".ply"));
    m.canonical = canonical_posed(m.cloud);
    ds.models.emplace(id, std::move(m));
  };
  for (const auto& id : ds.train_ids) load_model(id);
  for (const auto& id : ds.test_ids) load_model(id);

  if (with_views) {
    for (const auto& id : ds.train_ids)
      for (std::size_t v = 0; v < n_views; ++v) ds.views.push_back(load_view(root, view_name(id, v)));
    for (const auto& id : ds.test_ids)
      for (std::size_t v = 0; v < n_views; ++v) ds.views.push_back(load_view(root, view_name(id, v)));
  }
  return ds;
}

/// Training split in NCC, optionally subsampled to cap the step cost.
inline TrainingSet build_training_set(const LoadedDataset& ds, const NeighborGraph& graph,
                                      std::size_t max_points, std::uint64_t seed) {
  TrainingSet set;
  set.graph = graph;
  for (const auto& id : ds.train_ids) {
    const LoadedModel& model = ds.models.at(id);
    TrainModel tm;
    tm.id = id;
    tm.ncc = to_ncc(model.canonical);
    if (max_points > 0 && tm.ncc.size() > max_points) {
      Rng rng = Rng::substream(seed, "trainpts/" + id);
      tm.ncc = sample_points(tm.ncc, max_points, rng);
    }
    for (const LoadedView* view : ds.views_of(id)) {
      PointCloud ncc = to_ncc(view->posed);
      if (max_points > 0 && ncc.size() > max_points) {
        Rng rng = Rng::substream(seed, "trainpts/" + view->name);
        ncc = sample_points(ncc, max_points, rng);
      }
      tm.views_ncc.push_back(std::move(ncc));
    }
    set.models.push_back(std::move(tm));
  }
  return set;
}

}  // namespace canonreg
