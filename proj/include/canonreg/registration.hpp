#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <limits>
#include <string>
#include <vector>

#include "canonreg/net.hpp"

namespace canonreg {

/// Nearest-neighbor map in feature space: one j per i.
struct CorrespondenceSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> distances;

  std::size_t size() const { return pairs.size(); }
};

/// Exact feature-space nearest neighbor for every row of fx, searched in fy.
/// The scan prunes on the running best partial sum, which leaves the argmin
/// identical to a full exhaustive search; ties go to the lower index.
inline CorrespondenceSet feature_correspondences(const FeatureSet& fx, const FeatureSet& fy) {
  require(fx.features.rows() > 0 && fy.features.rows() > 0, ErrorCode::EmptyCloud,
          "feature correspondence over empty feature set");
  require(fx.features.cols() == fy.features.cols(), ErrorCode::ShapeError,
          "feature dimensions differ");
  const Eigen::Index n = fx.features.rows(), m = fy.features.rows(), k = fx.features.cols();

  CorrespondenceSet out;
  out.pairs.reserve(static_cast<std::size_t>(n));
  out.distances.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd row = fx.features.row(i);
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index best_j = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) {
        double d = row(c) - fy.features(j, c);
        acc += d * d;
        if (acc >= best) break;
      }
      if (acc < best) {
        best = acc;
        best_j = j;
      }
    }
    out.pairs.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(best_j));
    out.distances.push_back(std::sqrt(best));
  }
  return out;
}

/// Closed-form least-squares rigid alignment (SVD with determinant sign
/// correction). Global minimizer of sum ||T(src_i) - dst_i||^2 over SE(3).
inline RigidTransform kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  require(src.size() == dst.size(), ErrorCode::SizeMismatch, "kabsch input sizes differ");
  require(src.size() >= 3, ErrorCode::InsufficientPairs, "kabsch needs at least 3 pairs");

  Vec3 centroid_src = Vec3::Zero(), centroid_dst = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    centroid_src += src[i];
    centroid_dst += dst[i];
  }
  centroid_src /= double(src.size());
  centroid_dst /= double(dst.size());

  Mat3 cross_cov = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i)
    cross_cov += (src[i] - centroid_src) * (dst[i] - centroid_dst).transpose();

  Eigen::JacobiSVD<Mat3> svd(cross_cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 sv = svd.singularValues();
  // Collinear or coincident points leave the rotation underdetermined.
  require(sv(1) > 1e-12 * std::max(sv(0), 1e-300), ErrorCode::DegenerateConfiguration,
          "kabsch on a degenerate (collinear) configuration");

  Mat3 u = svd.matrixU(), v = svd.matrixV();
  double sign = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  Mat3 correction = Vec3(1.0, 1.0, sign).asDiagonal();
  RigidTransform t;
  t.rotation = v * correction * u.transpose();
  t.translation = centroid_dst - t.rotation * centroid_src;
  return t;
}

/// Keeps only pairs whose nearest neighbor is mutual: j is i's best match in
/// Y and i is j's best match back in X. Off by default; correspondences stay
/// one-directional X -> Y unless explicitly filtered.
inline CorrespondenceSet mutual_filter(const CorrespondenceSet& corr, const FeatureSet& fx,
                                       const FeatureSet& fy) {
  CorrespondenceSet reverse = feature_correspondences(fy, fx);
  CorrespondenceSet out;
  for (std::size_t c = 0; c < corr.pairs.size(); ++c) {
    auto [i, j] = corr.pairs[c];
    if (reverse.pairs[j].second == i) {
      out.pairs.push_back(corr.pairs[c]);
      out.distances.push_back(corr.distances[c]);
    }
  }
  return out;
}

struct RansacConfig {
  int sample_size = 3;
  int max_iterations = 4000;
  double inlier_threshold = 0.05;  // meters, matches the evaluation tau_1
  double confidence = 0.999;
  bool mutual_check = false;  // filter correspondences to mutual nearest neighbors
  std::uint64_t seed = 0;

  void validate() const {
    require(sample_size >= 3, ErrorCode::BadParameter, "RANSAC sample size must be >= 3");
    require(max_iterations >= 1, ErrorCode::BadParameter, "RANSAC needs a positive iteration budget");
    require(inlier_threshold > 0.0, ErrorCode::BadParameter, "inlier threshold must be positive");
    require(confidence > 0.0 && confidence <= 1.0, ErrorCode::BadParameter,
            "confidence must be in (0, 1]");
  }
};

struct RegistrationResult {
  RigidTransform transform;
  std::size_t inlier_count = 0;
  double inlier_ratio = 0.0;
  double fitness = 0.0;  // == inlier_ratio
  double rmse = 0.0;     // over inliers
};

namespace detail {

inline std::size_t count_inliers(const PointCloud& x, const PointCloud& y,
                                 const CorrespondenceSet& corr, const RigidTransform& t,
                                 double threshold, std::vector<std::size_t>* inliers = nullptr) {
  std::size_t count = 0;
  for (std::size_t c = 0; c < corr.pairs.size(); ++c) {
    auto [i, j] = corr.pairs[c];
    if ((t(x[i]) - y[j]).norm() < threshold) {
      ++count;
      if (inliers) inliers->push_back(c);
    }
  }
  return count;
}

}  // namespace detail

/// Robust registration: sample k correspondences, fit with Kabsch, keep the
/// largest consensus set, then refine with a final Kabsch over all inliers.
/// Early exit once 1-(1-w^k)^n reaches the configured confidence.
inline RegistrationResult ransac_register(const PointCloud& x, const PointCloud& y,
                                          const CorrespondenceSet& corr, const RansacConfig& cfg) {
  cfg.validate();
  const std::size_t n = corr.pairs.size();
  require(n >= static_cast<std::size_t>(cfg.sample_size), ErrorCode::InsufficientPairs,
          "fewer correspondences than the RANSAC sample size");
  for (auto [i, j] : corr.pairs)
    require(i < x.size() && j < y.size(), ErrorCode::BadParameter, "correspondence index out of range");

  Rng rng(cfg.seed);
  std::size_t best_count = 0;
  RigidTransform best_transform;
  bool have_best = false;

  std::vector<Vec3> sample_src(cfg.sample_size), sample_dst(cfg.sample_size);
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    auto pick = rng.sample_without_replacement(n, static_cast<std::size_t>(cfg.sample_size));
    for (int s = 0; s < cfg.sample_size; ++s) {
      auto [i, j] = corr.pairs[pick[static_cast<std::size_t>(s)]];
      sample_src[static_cast<std::size_t>(s)] = x[i];
      sample_dst[static_cast<std::size_t>(s)] = y[j];
    }
    RigidTransform t;
    try {
      t = kabsch(sample_src, sample_dst);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::DegenerateConfiguration) continue;
      throw;
    }
    std::size_t count = detail::count_inliers(x, y, corr, t, cfg.inlier_threshold);
    if (count > best_count || !have_best) {
      best_count = count;
      best_transform = t;
      have_best = true;
    }
    if (best_count > 0) {
      double w = double(best_count) / double(n);
      double p_sample_all_inlier = std::pow(w, cfg.sample_size);
      double p_missed = std::pow(1.0 - p_sample_all_inlier, iter + 1);
      if (1.0 - p_missed >= cfg.confidence) break;
    }
  }

  // Final refinement over the consensus set.
  std::vector<std::size_t> inliers;
  detail::count_inliers(x, y, corr, best_transform, cfg.inlier_threshold, &inliers);
  if (inliers.size() >= 3) {
    std::vector<Vec3> src, dst;
    src.reserve(inliers.size());
    dst.reserve(inliers.size());
    for (std::size_t c : inliers) {
      auto [i, j] = corr.pairs[c];
      src.push_back(x[i]);
      dst.push_back(y[j]);
    }
    try {
      best_transform = kabsch(src, dst);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateConfiguration) throw;
    }
  }

  RegistrationResult result;
  result.transform = best_transform;
  inliers.clear();
  result.inlier_count = detail::count_inliers(x, y, corr, best_transform, cfg.inlier_threshold, &inliers);
  result.inlier_ratio = double(result.inlier_count) / double(n);
  result.fitness = result.inlier_ratio;
  if (!inliers.empty()) {
    double ss = 0.0;
    for (std::size_t c : inliers) {
      auto [i, j] = corr.pairs[c];
      ss += (best_transform(x[i]) - y[j]).squaredNorm();
    }
    result.rmse = std::sqrt(ss / double(inliers.size()));
  }
  return result;
}

struct Candidate {
  std::string id;
  PointCloud cloud;
  FeatureSet features;
};

struct SelectionResult {
  std::string id;
  RegistrationResult registration;
  CorrespondenceSet correspondences;
};

/// Registers the observation against every candidate and keeps the one with
/// the largest inlier ratio; ties break toward lower rmse, then lower id.
/// Candidates run in parallel with independent per-candidate seeds.
inline SelectionResult select_model(const PointCloud& x, const std::vector<Candidate>& candidates,
                                    const FeatureSet& fx, const RansacConfig& cfg) {
  require(!candidates.empty(), ErrorCode::BadParameter, "select_model needs at least one candidate");
  std::vector<SelectionResult> results(candidates.size());
  parallel_for(candidates.size(), [&](std::size_t c) {
    const Candidate& cand = candidates[c];
    RansacConfig local = cfg;
    Rng sub = Rng::substream(cfg.seed, "candidate/" + cand.id);
    local.seed = sub.u64();
    SelectionResult r;
    r.id = cand.id;
    r.correspondences = feature_correspondences(fx, cand.features);
    if (cfg.mutual_check) r.correspondences = mutual_filter(r.correspondences, fx, cand.features);
    r.registration = ransac_register(x, cand.cloud, r.correspondences, local);
    results[c] = std::move(r);
  });

  std::size_t best = 0;
  for (std::size_t c = 1; c < results.size(); ++c) {
    const auto& a = results[c];
    const auto& b = results[best];
    if (a.registration.inlier_ratio != b.registration.inlier_ratio) {
      if (a.registration.inlier_ratio > b.registration.inlier_ratio) best = c;
    } else if (a.registration.rmse != b.registration.rmse) {
      if (a.registration.rmse < b.registration.rmse) best = c;
    } else if (a.id < b.id) {
      best = c;
    }
  }
  return results[best];
}

}  // namespace canonreg
