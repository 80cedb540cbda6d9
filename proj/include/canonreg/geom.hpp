#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "canonreg/core.hpp"

namespace canonreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Ordered list of 3D points in meters.
struct PointCloud {
  std::vector<Vec3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }

  bool all_finite() const {
    for (const auto& p : points)
      if (!p.allFinite()) return false;
    return true;
  }
};

/// SE(3) element: orthonormal rotation with det +1, plus translation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 operator()(const Vec3& p) const { return rotation * p + translation; }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    Mat3 should_be_identity = rotation.transpose() * rotation;
    if ((should_be_identity - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  Vec3 center() const { return 0.5 * (min + max); }
  double diagonal() const { return (max - min).norm(); }
  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= min.array() - tol).all() && (p.array() <= max.array() + tol).all();
  }
};

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& x) {
  PointCloud out;
  out.points.reserve(x.size());
  for (const auto& p : x.points) out.points.push_back(t(p));
  return out;
}

inline RigidTransform invert(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.transpose();
  out.translation = -(out.rotation * t.translation);
  return out;
}

/// compose(a, b) applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline Aabb bounding_box(const PointCloud& x) {
  require(!x.empty(), ErrorCode::EmptyCloud, "bounding_box of empty cloud");
  Aabb box{x.points[0], x.points[0]};
  for (const auto& p : x.points) {
    box.min = box.min.cwiseMin(p);
    box.max = box.max.cwiseMax(p);
  }
  return box;
}

// Voxel hashing: cell index is floor(coord / voxel), so a point exactly on a
// cell boundary lands in the cell whose lower edge it sits on. Deterministic
// across platforms.
using VoxelKey = std::array<std::int64_t, 3>;

inline VoxelKey voxel_key(const Vec3& p, double voxel) {
  return {static_cast<std::int64_t>(std::floor(p.x() / voxel)),
          static_cast<std::int64_t>(std::floor(p.y() / voxel)),
          static_cast<std::int64_t>(std::floor(p.z() / voxel))};
}

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::int64_t v : k) {
      std::uint64_t u = static_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (u >> (8 * b)) & 0xff;
        h *= 0x100000001b3ull;
      }
    }
    return static_cast<std::size_t>(h);
  }
};

/// One output point per occupied voxel, at the centroid of its members.
/// Output order follows first occurrence of each voxel in the input.
inline PointCloud voxel_downsample(const PointCloud& x, double voxel) {
  require(voxel > 0.0, ErrorCode::BadParameter, "voxel size must be positive");
  std::unordered_map<VoxelKey, std::size_t, VoxelKeyHash> slot;
  std::vector<Vec3> sums;
  std::vector<std::size_t> counts;
  for (const auto& p : x.points) {
    VoxelKey key = voxel_key(p, voxel);
    auto [it, inserted] = slot.try_emplace(key, sums.size());
    if (inserted) {
      sums.push_back(p);
      counts.push_back(1);
    } else {
      sums[it->second] += p;
      counts[it->second] += 1;
    }
  }
  PointCloud out;
  out.points.reserve(sums.size());
  for (std::size_t i = 0; i < sums.size(); ++i) out.points.push_back(sums[i] / double(counts[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Exact k-nearest-neighbor index (kd-tree). Approximate search is not
// acceptable here: MatchAcc and the correspondence definitions are exact.
// Queries are const and safe to run concurrently.
// ---------------------------------------------------------------------------

class KnnIndex {
 public:
  explicit KnnIndex(const PointCloud& cloud) : points_(cloud.points) {
    require(!points_.empty(), ErrorCode::EmptyCloud, "KnnIndex over empty cloud");
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    nodes_.reserve(points_.size());
    root_ = build(0, points_.size(), 0);
  }

  std::size_t size() const { return points_.size(); }

  struct Hit {
    std::size_t index;
    double distance;
  };

  /// Exactly min(k, N) hits, ascending by distance; ties broken by index.
  std::vector<Hit> query(const Vec3& q, std::size_t k) const {
    require(k >= 1, ErrorCode::BadParameter, "knn query with k < 1");
    k = std::min(k, points_.size());
    std::vector<Hit> heap;  // max-heap on (distance, index)
    heap.reserve(k + 1);
    search(root_, q, k, heap);
    std::sort(heap.begin(), heap.end(), [](const Hit& a, const Hit& b) {
      return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
    });
    return heap;
  }

  /// All indices with ||p - q|| < radius (strict), ascending by index.
  std::vector<std::size_t> radius_query(const Vec3& q, double radius) const {
    std::vector<std::size_t> out;
    radius_search(root_, q, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    std::size_t point;         // index into points_
    int axis;                  // split axis
    std::int32_t left = -1;
    std::int32_t right = -1;
  };

  std::int32_t build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    int axis = depth % 3;
    std::size_t mid = (lo + hi) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](std::size_t a, std::size_t b) {
                       double pa = points_[a][axis], pb = points_[b][axis];
                       return pa != pb ? pa < pb : a < b;
                     });
    std::int32_t id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(Node{order_[mid], axis});
    std::int32_t left = build(lo, mid, depth + 1);
    std::int32_t right = build(mid + 1, hi, depth + 1);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  static bool heap_less(const Hit& a, const Hit& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
  }

  void search(std::int32_t node, const Vec3& q, std::size_t k, std::vector<Hit>& heap) const {
    if (node < 0) return;
    const Node& n = nodes_[node];
    const Vec3& p = points_[n.point];
    double d = (p - q).norm();
    Hit hit{n.point, d};
    if (heap.size() < k) {
      heap.push_back(hit);
      std::push_heap(heap.begin(), heap.end(), heap_less);
    } else if (heap_less(hit, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), heap_less);
      heap.back() = hit;
      std::push_heap(heap.begin(), heap.end(), heap_less);
    }
    double delta = q[n.axis] - p[n.axis];
    std::int32_t near = delta < 0 ? n.left : n.right;
    std::int32_t far = delta < 0 ? n.right : n.left;
    search(near, q, k, heap);
    if (heap.size() < k || std::abs(delta) <= heap.front().distance) search(far, q, k, heap);
  }

  void radius_search(std::int32_t node, const Vec3& q, double r2, std::vector<std::size_t>& out) const {
    if (node < 0) return;
    const Node& n = nodes_[node];
    const Vec3& p = points_[n.point];
    if ((p - q).squaredNorm() < r2) out.push_back(n.point);
    double delta = q[n.axis] - p[n.axis];
    std::int32_t near = delta < 0 ? n.left : n.right;
    std::int32_t far = delta < 0 ? n.right : n.left;
    radius_search(near, q, r2, out);
    if (delta * delta < r2) radius_search(far, q, r2, out);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

inline std::vector<KnnIndex::Hit> knn_query(const KnnIndex& index, const Vec3& q, std::size_t k) {
  return index.query(q, k);
}

// Random rotation uniform over SO(3) via quaternion sampling (Shoemake).
inline Mat3 random_rotation(Rng& rng) {
  double u1 = rng.unit(), u2 = rng.unit(), u3 = rng.unit();
  double s1 = std::sqrt(1.0 - u1), s2 = std::sqrt(u1);
  const double two_pi = 6.28318530717958647692;
  Eigen::Quaterniond q(s2 * std::cos(two_pi * u3), s1 * std::sin(two_pi * u2),
                       s1 * std::cos(two_pi * u2), s2 * std::sin(two_pi * u3));
  return q.normalized().toRotationMatrix();
}

inline RigidTransform random_transform(Rng& rng, double translation_range = 1.0) {
  RigidTransform t;
  t.rotation = random_rotation(rng);
  t.translation = Vec3(rng.uniform(-translation_range, translation_range),
                       rng.uniform(-translation_range, translation_range),
                       rng.uniform(-translation_range, translation_range));
  return t;
}

inline Mat3 rotation_about_z(double angle) {
  Mat3 r;
  r << std::cos(angle), -std::sin(angle), 0.0, std::sin(angle), std::cos(angle), 0.0, 0.0, 0.0, 1.0;
  return r;
}

}  // namespace canonreg
