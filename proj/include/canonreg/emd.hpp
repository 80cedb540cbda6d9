#pragma once

#include <Eigen/Dense>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "canonreg/ncc.hpp"

namespace canonreg {

// ---------------------------------------------------------------------------
// Exact minimum-cost assignment (Jonker-Volgenant shortest augmenting path,
// O(n^3)). The full n x n cost matrix is materialized: n=2048 doubles is
// 32 MiB, the documented memory bound.
// ---------------------------------------------------------------------------

inline double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>* assignment = nullptr) {
  const int n = static_cast<int>(cost.rows());
  require(cost.cols() == n, ErrorCode::SizeMismatch, "assignment needs a square cost matrix");
  if (n == 0) return 0.0;

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> potential_row(n, 0.0), potential_col(n + 1, 0.0);
  std::vector<int> matched_row(n + 1, -1);  // matched_row[col] = row, col n is the virtual start
  std::vector<int> from_col(n + 1, -1);

  for (int row = 0; row < n; ++row) {
    int col = n;
    matched_row[col] = row;
    std::vector<double> min_slack(n + 1, inf);
    std::vector<bool> visited(n + 1, false);
    do {
      visited[col] = true;
      int pivot_row = matched_row[col];
      double delta = inf;
      int next_col = -1;
      for (int c = 0; c < n; ++c) {
        if (visited[c]) continue;
        double slack = cost(pivot_row, c) - potential_row[pivot_row] - potential_col[c];
        if (slack < min_slack[c]) {
          min_slack[c] = slack;
          from_col[c] = col;
        }
        if (min_slack[c] < delta) {
          delta = min_slack[c];
          next_col = c;
        }
      }
      for (int c = 0; c <= n; ++c) {
        if (visited[c]) {
          potential_row[matched_row[c]] += delta;
          potential_col[c] -= delta;
        } else {
          min_slack[c] -= delta;
        }
      }
      col = next_col;
    } while (matched_row[col] != -1);
    while (col != n) {
      int prev = from_col[col];
      matched_row[col] = matched_row[prev];
      col = prev;
    }
  }

  double total = 0.0;
  if (assignment) assignment->assign(n, -1);
  for (int c = 0; c < n; ++c) {
    total += cost(matched_row[c], c);
    if (assignment) (*assignment)[matched_row[c]] = c;
  }
  return total;
}

/// Earth Mover's distance between equal-size point sets: minimum over
/// one-to-one correspondences of the summed Euclidean distances.
inline double emd_exact(const PointCloud& x, const PointCloud& y) {
  require(x.size() == y.size(), ErrorCode::SizeMismatch, "EMD requires equal-size point sets");
  const int n = static_cast<int>(x.size());
  if (n == 0) return 0.0;
  Eigen::MatrixXd cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = (x.points[i] - y.points[j]).norm();
  return solve_assignment(cost);
}

struct NeighborEntry {
  std::string id;
  double emd;
};

/// Per model: k nearest other models, ascending by EMD. Not symmetric.
struct NeighborGraph {
  std::map<std::string, std::vector<NeighborEntry>> neighbors;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
};

/// Deterministic n_samples-point subset (uniform without replacement).
inline PointCloud sample_points(const PointCloud& cloud, std::size_t n_samples, Rng& rng) {
  require(n_samples >= 1, ErrorCode::BadParameter, "n_samples must be >= 1");
  if (n_samples >= cloud.size()) return cloud;
  PointCloud out;
  out.points.reserve(n_samples);
  for (std::size_t idx : rng.sample_without_replacement(cloud.size(), n_samples))
    out.points.push_back(cloud.points[idx]);
  return out;
}

/// EMD is computed between NCC-normalized samples so shape differences are
/// not dominated by object size. Pairwise distances run on the work pool;
/// each pair is computed once and mirrored.
inline NeighborGraph annotate_neighbors(const std::vector<std::pair<std::string, PointCloud>>& models,
                                        std::size_t k, std::size_t n_samples, std::uint64_t seed) {
  require(models.size() >= k + 1, ErrorCode::BadParameter,
          "need at least k+1 models to pick k neighbors");
  require(n_samples >= 1, ErrorCode::BadParameter, "n_samples must be >= 1");

  // Every model is sampled with a fresh generator at the same seed, so two
  // identical models pick identical subsets (and report EMD exactly 0).
  const std::size_t m = models.size();
  std::vector<PointCloud> sampled(m);
  for (std::size_t i = 0; i < m; ++i) {
    Rng rng(seed);
    sampled[i] = sample_points(to_ncc(canonical_posed(models[i].second)), n_samples, rng);
  }

  std::vector<std::pair<std::size_t, std::size_t>> tasks;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) tasks.emplace_back(a, b);

  Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(m, m);
  parallel_for(tasks.size(), [&](std::size_t t) {
    auto [a, b] = tasks[t];
    double d = emd_exact(sampled[a], sampled[b]);
    dist(a, b) = d;
    dist(b, a) = d;
  });

  NeighborGraph graph;
  graph.seed = seed;
  graph.n_samples = n_samples;
  for (std::size_t a = 0; a < m; ++a) {
    std::vector<std::size_t> order;
    for (std::size_t b = 0; b < m; ++b)
      if (b != a) order.push_back(b);
    std::sort(order.begin(), order.end(), [&](std::size_t u, std::size_t v) {
      return dist(a, u) != dist(a, v) ? dist(a, u) < dist(a, v) : models[u].first < models[v].first;
    });
    std::vector<NeighborEntry> entries;
    for (std::size_t r = 0; r < k; ++r) entries.push_back({models[order[r]].first, dist(a, order[r])});
    graph.neighbors[models[a].first] = std::move(entries);
  }
  return graph;
}

inline nlohmann::json neighbor_graph_to_json(const NeighborGraph& graph) {
  nlohmann::json j;
  j["seed"] = graph.seed;
  j["n_samples"] = graph.n_samples;
  nlohmann::json byid;
  for (const auto& [id, entries] : graph.neighbors) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries) list.push_back({{"id", e.id}, {"emd", e.emd}});
    byid[id] = list;
  }
  j["neighbors"] = byid;
  return j;
}

inline NeighborGraph neighbor_graph_from_json(const nlohmann::json& j) {
  NeighborGraph graph;
  graph.seed = j.value("seed", std::uint64_t(0));
  graph.n_samples = j.value("n_samples", std::size_t(0));
  for (const auto& [id, list] : j.at("neighbors").items()) {
    std::vector<NeighborEntry> entries;
    for (const auto& e : list) entries.push_back({e.at("id").get<std::string>(), e.at("emd").get<double>()});
    graph.neighbors[id] = std::move(entries);
  }
  return graph;
}

}  // namespace canonreg
