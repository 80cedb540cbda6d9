#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "canonreg/geom.hpp"

namespace canonreg {

namespace hull_detail {

struct Face {
  int a, b, c;
  Vec3 normal;
  double offset;
  bool alive = true;
  std::vector<int> conflicts;
  double max_conflict_dist = 0.0;
};

inline double signed_dist(const Face& f, const Vec3& p) { return f.normal.dot(p) - f.offset; }

inline Face make_face(int a, int b, int c, const std::vector<Vec3>& pts, const Vec3& interior) {
  Face f;
  f.a = a;
  f.b = b;
  f.c = c;
  Vec3 n = (pts[b] - pts[a]).cross(pts[c] - pts[a]);
  double len = n.norm();
  if (len > 0.0) n /= len;
  f.normal = n;
  f.offset = n.dot(pts[a]);
  if (signed_dist(f, interior) > 0.0) {  // flip outward
    std::swap(f.b, f.c);
    f.normal = -f.normal;
    f.offset = -f.offset;
  }
  return f;
}

// Affine rank of the point set with a relative tolerance, plus an orthonormal
// basis of the spanned subspace.
inline int affine_rank(const std::vector<Vec3>& pts, double eps, Vec3& origin, Mat3& basis) {
  origin = Vec3::Zero();
  for (const auto& p : pts) origin += p;
  origin /= double(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - origin) * (p - origin).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  Vec3 evals = eig.eigenvalues().cwiseMax(0.0);
  basis = eig.eigenvectors();  // ascending eigenvalues
  double scale = std::sqrt(evals(2));
  int rank = 0;
  for (int i = 0; i < 3; ++i)
    if (std::sqrt(evals(i)) > eps * std::max(scale, 1e-300)) ++rank;
  return rank;
}

inline std::vector<std::size_t> hull_2d(const std::vector<std::pair<double, double>>& pts) {
  std::vector<std::size_t> order(pts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return pts[i] != pts[j] ? pts[i] < pts[j] : i < j;
  });
  auto cross = [&](std::size_t o, std::size_t a, std::size_t b) {
    return (pts[a].first - pts[o].first) * (pts[b].second - pts[o].second) -
           (pts[a].second - pts[o].second) * (pts[b].first - pts[o].first);
  };
  std::vector<std::size_t> chain(2 * order.size());
  std::size_t k = 0;
  for (std::size_t idx = 0; idx < order.size(); ++idx) {  // lower
    std::size_t i = order[idx];
    while (k >= 2 && cross(chain[k - 2], chain[k - 1], i) <= 0.0) --k;
    chain[k++] = i;
  }
  for (std::size_t idx = order.size(), lower = k + 1; idx-- > 0;) {  // upper
    std::size_t i = order[idx];
    while (k >= lower && cross(chain[k - 2], chain[k - 1], i) <= 0.0) --k;
    chain[k++] = i;
  }
  chain.resize(k > 1 ? k - 1 : k);
  return chain;
}

}  // namespace hull_detail

/// Indices of the points that are vertices of the convex hull. Degenerate
/// inputs (coincident, collinear, coplanar) fall back to hulls in the spanned
/// subspace. Result is sorted ascending; duplicates removed.
inline std::vector<std::size_t> convex_hull_vertices(const std::vector<Vec3>& pts,
                                                     double eps_rel = 1e-10) {
  using namespace hull_detail;
  const std::size_t n = pts.size();
  if (n == 0) return {};
  if (n <= 2) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }

  Vec3 origin;
  Mat3 basis;
  int rank = affine_rank(pts, eps_rel, origin, basis);

  if (rank == 0) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  if (rank == 1) {
    Vec3 axis = basis.col(2);
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < n; ++i) {
      double t = axis.dot(pts[i] - origin);
      if (t < axis.dot(pts[lo] - origin)) lo = i;
      if (t > axis.dot(pts[hi] - origin)) hi = i;
    }
    std::set<std::size_t> uniq{lo, hi};
    return {uniq.begin(), uniq.end()};
  }
  if (rank == 2) {
    Vec3 u = basis.col(2), v = basis.col(1);
    std::vector<std::pair<double, double>> plane(n);
    for (std::size_t i = 0; i < n; ++i)
      plane[i] = {u.dot(pts[i] - origin), v.dot(pts[i] - origin)};
    auto verts = hull_2d(plane);
    std::sort(verts.begin(), verts.end());
    verts.erase(std::unique(verts.begin(), verts.end()), verts.end());
    return verts;
  }

  // Full-rank quickhull.
  double diag = 0.0;
  {
    Vec3 lo = pts[0], hi = pts[0];
    for (const auto& p : pts) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    diag = (hi - lo).norm();
  }
  const double eps = eps_rel * std::max(diag, 1e-300);

  // Initial tetrahedron: extremes, then farthest from line, then from plane.
  int i0 = 0, i1 = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (pts[i].x() < pts[static_cast<std::size_t>(i0)].x()) i0 = static_cast<int>(i);
    if (pts[i].x() > pts[static_cast<std::size_t>(i1)].x()) i1 = static_cast<int>(i);
  }
  if (i0 == i1) i1 = (i0 + 1) % static_cast<int>(n);
  int i2 = -1;
  double best = eps;
  Vec3 dir = pts[static_cast<std::size_t>(i1)] - pts[static_cast<std::size_t>(i0)];
  for (std::size_t i = 0; i < n; ++i) {
    double d = dir.cross(pts[i] - pts[static_cast<std::size_t>(i0)]).norm();
    if (d > best) {
      best = d;
      i2 = static_cast<int>(i);
    }
  }
  require(i2 >= 0, ErrorCode::DegenerateShape, "quickhull: rank detection disagreed (collinear)");
  int i3 = -1;
  best = eps;
  Vec3 plane_n = (pts[static_cast<std::size_t>(i1)] - pts[static_cast<std::size_t>(i0)])
                     .cross(pts[static_cast<std::size_t>(i2)] - pts[static_cast<std::size_t>(i0)])
                     .normalized();
  for (std::size_t i = 0; i < n; ++i) {
    double d = std::abs(plane_n.dot(pts[i] - pts[static_cast<std::size_t>(i0)]));
    if (d > best) {
      best = d;
      i3 = static_cast<int>(i);
    }
  }
  require(i3 >= 0, ErrorCode::DegenerateShape, "quickhull: rank detection disagreed (coplanar)");

  Vec3 interior = 0.25 * (pts[static_cast<std::size_t>(i0)] + pts[static_cast<std::size_t>(i1)] +
                          pts[static_cast<std::size_t>(i2)] + pts[static_cast<std::size_t>(i3)]);
  std::vector<Face> faces;
  faces.push_back(make_face(i0, i1, i2, pts, interior));
  faces.push_back(make_face(i0, i1, i3, pts, interior));
  faces.push_back(make_face(i0, i2, i3, pts, interior));
  faces.push_back(make_face(i1, i2, i3, pts, interior));

  auto assign_conflicts = [&](const std::vector<int>& candidates, std::size_t first_face) {
    for (int pi : candidates) {
      double best_d = eps;
      int best_f = -1;
      for (std::size_t f = first_face; f < faces.size(); ++f) {
        if (!faces[f].alive) continue;
        double d = signed_dist(faces[f], pts[static_cast<std::size_t>(pi)]);
        if (d > best_d) {
          best_d = d;
          best_f = static_cast<int>(f);
        }
      }
      if (best_f >= 0) {
        faces[static_cast<std::size_t>(best_f)].conflicts.push_back(pi);
        faces[static_cast<std::size_t>(best_f)].max_conflict_dist =
            std::max(faces[static_cast<std::size_t>(best_f)].max_conflict_dist, best_d);
      }
    }
  };

  std::vector<int> initial;
  initial.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    int ii = static_cast<int>(i);
    if (ii != i0 && ii != i1 && ii != i2 && ii != i3) initial.push_back(ii);
  }
  assign_conflicts(initial, 0);

  for (std::size_t guard = 0;; ++guard) {
    require(guard <= 16 * n + 64, ErrorCode::StateError, "quickhull failed to converge");
    int active = -1;
    for (std::size_t f = 0; f < faces.size(); ++f) {
      if (faces[f].alive && !faces[f].conflicts.empty()) {
        active = static_cast<int>(f);
        break;
      }
    }
    if (active < 0) break;

    Face& seed = faces[static_cast<std::size_t>(active)];
    int apex = seed.conflicts[0];
    double apex_d = signed_dist(seed, pts[static_cast<std::size_t>(apex)]);
    for (int pi : seed.conflicts) {
      double d = signed_dist(seed, pts[static_cast<std::size_t>(pi)]);
      if (d > apex_d) {
        apex_d = d;
        apex = pi;
      }
    }
    const Vec3& p = pts[static_cast<std::size_t>(apex)];

    std::vector<int> visible;
    std::vector<int> orphaned;
    for (std::size_t f = 0; f < faces.size(); ++f) {
      if (!faces[f].alive) continue;
      if (signed_dist(faces[f], p) > eps) {
        visible.push_back(static_cast<int>(f));
        faces[f].alive = false;
        for (int pi : faces[f].conflicts)
          if (pi != apex) orphaned.push_back(pi);
        faces[f].conflicts.clear();
      }
    }

    // Horizon: directed edges of visible faces whose twin is not visible.
    std::map<std::pair<int, int>, int> edge_count;
    for (int fi : visible) {
      const Face& f = faces[static_cast<std::size_t>(fi)];
      int vs[3] = {f.a, f.b, f.c};
      for (int e = 0; e < 3; ++e) {
        int u = vs[e], v = vs[(e + 1) % 3];
        edge_count[{std::min(u, v), std::max(u, v)}] += 1;
      }
    }
    std::size_t first_new = faces.size();
    for (int fi : visible) {
      Face f = faces[static_cast<std::size_t>(fi)];
      int vs[3] = {f.a, f.b, f.c};
      for (int e = 0; e < 3; ++e) {
        int u = vs[e], v = vs[(e + 1) % 3];
        if (edge_count[{std::min(u, v), std::max(u, v)}] == 1)
          faces.push_back(make_face(u, v, apex, pts, interior));
      }
    }
    assign_conflicts(orphaned, first_new);
  }

  std::set<std::size_t> verts;
  for (const auto& f : faces) {
    if (!f.alive) continue;
    verts.insert(static_cast<std::size_t>(f.a));
    verts.insert(static_cast<std::size_t>(f.b));
    verts.insert(static_cast<std::size_t>(f.c));
  }
  return {verts.begin(), verts.end()};
}

}  // namespace canonreg
