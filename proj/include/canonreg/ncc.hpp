#pragma once

#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "canonreg/geom.hpp"

namespace canonreg {

/// A cloud with its object-to-world pose and the canonical bounding-box
/// diagonal length used for NCC normalization.
struct PosedCloud {
  PointCloud cloud;
  RigidTransform pose;  // object-to-world
  double scale = 1.0;   // canonical bbox diagonal, meters
};

enum class PairLabel { Positive, Negative };

struct MatchPair {
  std::size_t i;  // index into X
  std::size_t j;  // index into Y
  PairLabel label;

  bool operator==(const MatchPair&) const = default;
};

struct MatchSet {
  std::vector<MatchPair> pairs;

  std::size_t count(PairLabel label) const {
    std::size_t n = 0;
    for (const auto& p : pairs)
      if (p.label == label) ++n;
    return n;
  }
};

/// X_ncc = scale^-1 * pose^-1(X): canonical frame, unit bbox diagonal.
inline PointCloud to_ncc(const PosedCloud& p) {
  require(p.scale > 0.0, ErrorCode::BadParameter, "NCC scale must be positive");
  RigidTransform inv = invert(p.pose);
  PointCloud out;
  out.points.reserve(p.cloud.size());
  double inv_scale = 1.0 / p.scale;
  for (const auto& q : p.cloud.points) out.points.push_back(inv(q) * inv_scale);
  return out;
}

/// Bounding-box diagonal of a model in canonical pose.
inline double canonical_scale(const PointCloud& model) {
  require(model.size() >= 2, ErrorCode::DegenerateShape, "canonical_scale needs at least 2 points");
  return bounding_box(model).diagonal();
}

/// Canonical annotation of a model given in canonical pose: identity rotation,
/// translation at the bbox center, scale = bbox diagonal. to_ncc of the result
/// is centered at the origin with unit diagonal.
inline PosedCloud canonical_posed(const PointCloud& model) {
  Aabb box = bounding_box(model);
  require(box.diagonal() > 0.0, ErrorCode::DegenerateShape, "degenerate model bounding box");
  PosedCloud pc;
  pc.cloud = model;
  pc.pose.rotation = Mat3::Identity();
  pc.pose.translation = box.center();
  pc.scale = box.diagonal();
  return pc;
}

/// All (i, j) with ||x_i - y_j|| < tau (strict), labeled positive.
/// Exact: backed by a kd-tree radius search over Y.
inline MatchSet positive_pairs(const PointCloud& x_ncc, const PointCloud& y_ncc, double tau) {
  require(tau > 0.0, ErrorCode::BadParameter, "pair radius tau must be positive");
  MatchSet out;
  if (x_ncc.empty() || y_ncc.empty()) return out;
  KnnIndex index(y_ncc);
  for (std::size_t i = 0; i < x_ncc.size(); ++i) {
    for (std::size_t j : index.radius_query(x_ncc[i], tau))
      out.pairs.push_back({i, j, PairLabel::Positive});
  }
  return out;
}

/// Positive pairs between two posed clouds after NCC normalization.
/// Indices refer to the original clouds.
inline MatchSet cross_instance_pairs(const PosedCloud& x, const PosedCloud& y, double tau) {
  return positive_pairs(to_ncc(x), to_ncc(y), tau);
}

struct PairSampleConfig {
  double tau = 0.025;           // same-instance radius in NCC units
  double negative_margin = 1.5; // negatives must be farther than margin*tau
};

/// Uniformly keeps n_pos positives without replacement and draws n_neg
/// negatives uniformly over index pairs, rejecting anything positive or
/// within margin*tau in NCC space. Deterministic given the seed.
inline MatchSet sample_pairs(const MatchSet& full, std::size_t n_pos, std::size_t n_neg,
                             const PointCloud& x_ncc, const PointCloud& y_ncc, std::uint64_t seed,
                             const PairSampleConfig& cfg = {}) {
  std::vector<std::size_t> positives;
  for (std::size_t k = 0; k < full.pairs.size(); ++k)
    if (full.pairs[k].label == PairLabel::Positive) positives.push_back(k);
  require(n_pos <= positives.size(), ErrorCode::InsufficientPairs,
          "requested more positives than available");

  Rng rng(seed);
  MatchSet out;
  out.pairs.reserve(n_pos + n_neg);
  for (std::size_t idx : rng.sample_without_replacement(positives.size(), n_pos))
    out.pairs.push_back(full.pairs[positives[idx]]);

  if (n_neg == 0) return out;
  require(!x_ncc.empty() && !y_ncc.empty(), ErrorCode::EmptyCloud, "negative sampling on empty cloud");

  std::unordered_set<std::uint64_t> taken;
  auto key = [&](std::size_t i, std::size_t j) {
    return static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(y_ncc.size()) + j;
  };
  for (const auto& p : full.pairs)
    if (p.label == PairLabel::Positive) taken.insert(key(p.i, p.j));

  KnnIndex index(y_ncc);
  double reject_radius = cfg.negative_margin * cfg.tau;
  std::size_t drawn = 0;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 1000 * (n_neg + 1);
  while (drawn < n_neg) {
    require(++attempts <= max_attempts, ErrorCode::InsufficientPairs,
            "cannot find enough negative pairs");
    std::size_t i = static_cast<std::size_t>(rng.below(x_ncc.size()));
    std::size_t j = static_cast<std::size_t>(rng.below(y_ncc.size()));
    if (taken.count(key(i, j))) continue;
    if ((x_ncc[i] - y_ncc[j]).norm() < reject_radius) continue;
    taken.insert(key(i, j));
    out.pairs.push_back({i, j, PairLabel::Negative});
    ++drawn;
  }
  return out;
}

// JSON lines: {"i": int, "j": int, "label": "pos"|"neg"}
inline std::string matchset_to_jsonl(const MatchSet& ms) {
  std::ostringstream out;
  for (const auto& p : ms.pairs) {
    out << "{\"i\": " << p.i << ", \"j\": " << p.j << ", \"label\": \""
        << (p.label == PairLabel::Positive ? "pos" : "neg") << "\"}\n";
  }
  return out.str();
}

inline MatchSet matchset_from_jsonl(const std::string& text) {
  MatchSet ms;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded(), ErrorCode::IoError, "malformed MatchSet line: " + line);
    std::string label = j.at("label").get<std::string>();
    require(label == "pos" || label == "neg", ErrorCode::IoError, "bad pair label: " + label);
    ms.pairs.push_back({j.at("i").get<std::size_t>(), j.at("j").get<std::size_t>(),
                        label == "pos" ? PairLabel::Positive : PairLabel::Negative});
  }
  return ms;
}

}  // namespace canonreg
