#pragma once

#include <Eigen/Dense>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "canonreg/io.hpp"
#include "canonreg/registration.hpp"

namespace canonreg {

/// Fraction of correspondences whose ground-truth-transformed source lands
/// within tau_1 of its matched target (strict inequality).
inline double match_accuracy(const PointCloud& x, const PointCloud& y, const CorrespondenceSet& corr,
                             const RigidTransform& t_true, double tau1) {
  require(!corr.pairs.empty(), ErrorCode::InsufficientPairs, "match accuracy over empty correspondences");
  require(tau1 > 0.0, ErrorCode::BadParameter, "tau_1 must be positive");
  std::size_t hits = 0;
  for (auto [i, j] : corr.pairs) {
    require(i < x.size() && j < y.size(), ErrorCode::BadParameter, "correspondence index out of range");
    if ((t_true(x[i]) - y[j]).norm() < tau1) ++hits;
  }
  return double(hits) / double(corr.pairs.size());
}

inline bool is_rotation(const Mat3& r, double tol = 1e-6) {
  if (!r.allFinite()) return false;
  if (((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

/// Relative rotation error: arccos((tr(R_est^T R_true) - 1) / 2), with the
/// trace argument clamped to [-1, 1] against floating-point drift at 0 and pi.
inline double rre(const Mat3& r_est, const Mat3& r_true) {
  require(is_rotation(r_est) && is_rotation(r_true), ErrorCode::BadParameter,
          "rre inputs must be rotations");
  double arg = ((r_est.transpose() * r_true).trace() - 1.0) / 2.0;
  arg = std::clamp(arg, -1.0, 1.0);
  return std::acos(arg);
}

/// Relative translation error: ||p_est - p_true||_2.
inline double rte(const Vec3& p_est, const Vec3& p_true) { return (p_est - p_true).norm(); }

struct EvalRecord {
  std::string case_id;
  double match_acc = 0.0;
  double rre_rad = 0.0;
  double rte_m = 0.0;
  double inlier_ratio = 0.0;
  std::optional<double> runtime_ms;  // volatile; excluded from artifacts by default

  // Pass flag at the conventional 5% positive inlier ratio.
  bool match_pass() const { return match_acc >= 0.05; }
};

struct ThresholdTable {
  std::vector<double> rre_thresholds_deg;
  std::vector<double> rte_thresholds_cm;
  std::vector<double> rre_fractions;
  std::vector<double> rte_fractions;
  std::size_t case_count = 0;
};

constexpr double kRadToDeg = 57.29577951308232087680;

/// Fraction of records strictly below each RRE/RTE threshold. Default
/// thresholds: 10/20/30 degrees and 5/10 cm.
inline ThresholdTable threshold_table(const std::vector<EvalRecord>& records,
                                      std::vector<double> rre_thresholds_deg = {10.0, 20.0, 30.0},
                                      std::vector<double> rte_thresholds_cm = {5.0, 10.0}) {
  require(!records.empty(), ErrorCode::InsufficientPairs, "threshold table over empty records");
  ThresholdTable table;
  table.rre_thresholds_deg = std::move(rre_thresholds_deg);
  table.rte_thresholds_cm = std::move(rte_thresholds_cm);
  std::sort(table.rre_thresholds_deg.begin(), table.rre_thresholds_deg.end());
  std::sort(table.rte_thresholds_cm.begin(), table.rte_thresholds_cm.end());
  table.case_count = records.size();
  for (double t : table.rre_thresholds_deg) {
    std::size_t n = 0;
    for (const auto& r : records)
      if (r.rre_rad * kRadToDeg < t) ++n;
    table.rre_fractions.push_back(double(n) / double(records.size()));
  }
  for (double t : table.rte_thresholds_cm) {
    std::size_t n = 0;
    for (const auto& r : records)
      if (r.rte_m * 100.0 < t) ++n;
    table.rte_fractions.push_back(double(n) / double(records.size()));
  }
  for (std::size_t i = 1; i < table.rre_fractions.size(); ++i)
    require(table.rre_fractions[i] >= table.rre_fractions[i - 1], ErrorCode::StateError,
            "threshold fractions must be nondecreasing");
  for (std::size_t i = 1; i < table.rte_fractions.size(); ++i)
    require(table.rte_fractions[i] >= table.rte_fractions[i - 1], ErrorCode::StateError,
            "threshold fractions must be nondecreasing");
  return table;
}

inline std::string eval_records_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream out;
  out << "case_id,match_acc,rre_deg,rte_m,inlier_ratio,match_pass,runtime_ms\n";
  for (const auto& r : records) {
    out << r.case_id << ',' << format_double(r.match_acc) << ',' << format_double(r.rre_rad * kRadToDeg)
        << ',' << format_double(r.rte_m) << ',' << format_double(r.inlier_ratio) << ','
        << (r.match_pass() ? 1 : 0) << ',';
    if (r.runtime_ms) out << format_double(*r.runtime_ms);
    out << '\n';
  }
  return out.str();
}

/// Text table in the percent-within-threshold layout, one row per method.
inline std::string render_threshold_table(const std::vector<std::pair<std::string, ThresholdTable>>& rows) {
  require(!rows.empty(), ErrorCode::InsufficientPairs, "no rows to render");
  const ThresholdTable& first = rows.front().second;
  std::ostringstream out;
  out << std::left << std::setw(16) << "method" << "| RRE (degree)";
  for (double t : first.rre_thresholds_deg) out << ' ' << std::setw(6) << t;
  out << "| RTE (cm)";
  for (double t : first.rte_thresholds_cm) out << ' ' << std::setw(6) << t;
  out << '\n';
  for (const auto& [name, table] : rows) {
    out << std::left << std::setw(16) << name << "|             ";
    out << std::fixed << std::setprecision(2);
    for (double f : table.rre_fractions) out << ' ' << std::setw(6) << 100.0 * f;
    out << "|         ";
    for (double f : table.rte_fractions) out << ' ' << std::setw(6) << 100.0 * f;
    out.unsetf(std::ios_base::floatfield);
    out << std::setprecision(6) << '\n';
  }
  return out.str();
}

}  // namespace canonreg
