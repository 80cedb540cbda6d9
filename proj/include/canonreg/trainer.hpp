#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "canonreg/emd.hpp"
#include "canonreg/io.hpp"
#include "canonreg/ncc.hpp"
#include "canonreg/net.hpp"

namespace canonreg {

struct TrainConfig {
  double p_pos = 0.1;
  double p_neg = 1.4;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double lr_decay = 0.5;
  int lr_decay_every = 20;       // epochs
  std::vector<int> epochs_per_phase = {30, 30};
  std::size_t n_pos = 1024;
  std::size_t n_neg = 1024;
  double tau_same = 0.025;       // NCC units
  double tau_cross = 0.05;       // enlarged radius for cross-instance pairs
  double negative_margin = 1.5;
  bool hinged = false;           // max(0,.)^2 variant; the literal loss is the default
  int steps_per_model = 1;       // pair draws per model per epoch
  std::uint64_t seed = 0;

  void validate() const {
    require(0.0 <= p_pos && p_pos < p_neg && p_neg <= 2.0, ErrorCode::BadParameter,
            "need 0 <= p_pos < p_neg <= 2 for unit-norm features");
    require(learning_rate > 0.0, ErrorCode::BadParameter, "learning rate must be positive");
    require(momentum >= 0.0 && momentum < 1.0, ErrorCode::BadParameter, "momentum must be in [0,1)");
  }
};

/// Pair-source mix of one curriculum phase; fractions sum to 1.
struct CurriculumPhase {
  std::string id;
  double frac_same = 1.0;             // model paired with its own partial views
  double frac_model_neighbor = 0.0;   // model paired with an EMD-neighbor model
  double frac_partial_neighbor = 0.0; // partial view paired with an EMD-neighbor model

  void validate() const {
    double sum = frac_same + frac_model_neighbor + frac_partial_neighbor;
    require(std::abs(sum - 1.0) < 1e-9, ErrorCode::BadParameter, "phase fractions must sum to 1");
    require(frac_same >= 0 && frac_model_neighbor >= 0 && frac_partial_neighbor >= 0,
            ErrorCode::BadParameter, "phase fractions must be nonnegative");
  }
};

/// Same-instance pairs first, then cross-instance pairs with a few
/// same-instance pairs kept for stability.
inline std::vector<CurriculumPhase> default_schedule() {
  return {{"same_instance", 1.0, 0.0, 0.0}, {"cross_instance", 0.25, 0.375, 0.375}};
}

/// L_con = m (d - p_pos)^2 + (1-m) (d - p_neg)^2 with d the feature 2-norm
/// distance; exactly the literal formula unless the hinged variant is on.
inline double contrastive_loss(const Eigen::VectorXd& fx, const Eigen::VectorXd& fy, bool matched,
                               const TrainConfig& cfg) {
  double d = (fx - fy).norm();
  if (cfg.hinged) {
    double t = matched ? std::max(0.0, d - cfg.p_pos) : std::max(0.0, cfg.p_neg - d);
    return t * t;
  }
  double t = matched ? (d - cfg.p_pos) : (d - cfg.p_neg);
  return t * t;
}

struct BatchLoss {
  double loss = 0.0;
  double mean_pos = 0.0;
  double mean_neg = 0.0;
  Eigen::MatrixXd grad_x;
  Eigen::MatrixXd grad_y;
};

/// Mean of per-pair losses over positives plus mean over negatives, with
/// analytic gradients on both feature matrices.
inline BatchLoss batch_loss(const FeatureSet& fx, const FeatureSet& fy, const MatchSet& ms,
                            const TrainConfig& cfg) {
  cfg.validate();
  require(!ms.pairs.empty(), ErrorCode::InsufficientPairs, "batch loss over empty match set");
  const std::size_t n_pos = ms.count(PairLabel::Positive);
  const std::size_t n_neg = ms.pairs.size() - n_pos;

  BatchLoss out;
  out.grad_x = Eigen::MatrixXd::Zero(fx.features.rows(), fx.features.cols());
  out.grad_y = Eigen::MatrixXd::Zero(fy.features.rows(), fy.features.cols());

  for (const auto& p : ms.pairs) {
    require(p.i < static_cast<std::size_t>(fx.features.rows()) &&
                p.j < static_cast<std::size_t>(fy.features.rows()),
            ErrorCode::BadParameter, "match pair index out of range");
    Eigen::RowVectorXd diff =
        fx.features.row(static_cast<Eigen::Index>(p.i)) - fy.features.row(static_cast<Eigen::Index>(p.j));
    double d = diff.norm();
    bool matched = p.label == PairLabel::Positive;
    double weight = matched ? 1.0 / double(n_pos) : 1.0 / double(n_neg);
    double target = matched ? cfg.p_pos : cfg.p_neg;

    double residual = d - target;
    bool active = true;
    if (cfg.hinged) active = matched ? (d > target) : (d < target);
    double term = active ? residual * residual : 0.0;

    (matched ? out.mean_pos : out.mean_neg) += term * weight;
    if (active && d > 0.0) {
      Eigen::RowVectorXd g = (2.0 * residual * weight / d) * diff;
      out.grad_x.row(static_cast<Eigen::Index>(p.i)) += g;
      out.grad_y.row(static_cast<Eigen::Index>(p.j)) -= g;
    }
  }
  out.loss = out.mean_pos + out.mean_neg;
  return out;
}

// ---------------------------------------------------------------------------
// Training set: models in canonical metric pose plus their partial views,
// all pre-normalized to NCC once up front.
// ---------------------------------------------------------------------------

struct TrainModel {
  std::string id;
  PointCloud ncc;                     // model in NCC
  std::vector<PointCloud> views_ncc;  // partial views in NCC
};

struct TrainingSet {
  std::vector<TrainModel> models;
  NeighborGraph graph;

  const TrainModel* find(const std::string& id) const {
    for (const auto& m : models)
      if (m.id == id) return &m;
    return nullptr;
  }
};

struct EpochStats {
  int phase = 0;
  int epoch = 0;  // global epoch index
  double mean_pos_loss = 0.0;
  double mean_neg_loss = 0.0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  int steps = 0;
};

struct TrainResult {
  FeatureNet net;
  std::vector<EpochStats> history;
};

/// SGD with momentum over the curriculum schedule. All sampling flows from
/// cfg.seed in a fixed iteration order, so a given seed reproduces the
/// checkpoint bitwise. NaN loss aborts with the failing epoch index.
inline TrainResult train(const TrainingSet& data, FeatureNet net,
                         const std::vector<CurriculumPhase>& schedule, const TrainConfig& cfg,
                         const std::function<void(int, const FeatureNet&)>& on_phase_end = {}) {
  cfg.validate();
  for (const auto& phase : schedule) phase.validate();
  require(!data.models.empty(), ErrorCode::BadParameter, "training set is empty");
  for (const auto& m : data.models)
    require(data.graph.neighbors.count(m.id) > 0 || schedule.size() < 2, ErrorCode::BadParameter,
            "neighbor graph does not cover model " + m.id);

  TrainResult result;
  Rng rng = Rng::substream(cfg.seed, "train");
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count(net)));

  int global_epoch = 0;
  auto check_finite = [&](const Eigen::VectorXd& params) {
    if (!params.allFinite())
      fail(ErrorCode::TrainingDiverged,
           "non-finite parameters at epoch " + std::to_string(global_epoch));
  };
  check_finite(flatten_parameters(net));
  for (std::size_t phase_idx = 0; phase_idx < schedule.size(); ++phase_idx) {
    const CurriculumPhase& phase = schedule[phase_idx];
    int epochs = phase_idx < cfg.epochs_per_phase.size()
                     ? cfg.epochs_per_phase[phase_idx]
                     : (cfg.epochs_per_phase.empty() ? 0 : cfg.epochs_per_phase.back());
    for (int e = 0; e < epochs; ++e, ++global_epoch) {
      double lr = cfg.learning_rate *
                  std::pow(cfg.lr_decay, std::floor(double(global_epoch) / double(cfg.lr_decay_every)));
      EpochStats stats;
      stats.phase = static_cast<int>(phase_idx);
      stats.epoch = global_epoch;
      stats.learning_rate = lr;

      for (const auto& model : data.models) {
        for (int s = 0; s < cfg.steps_per_model; ++s) {
          // Draw the pair source for this step from the phase mix.
          double r = rng.unit();
          const PointCloud* x = nullptr;
          const PointCloud* y = nullptr;
          double tau = cfg.tau_same;
          auto pick_view = [&]() -> const PointCloud* {
            if (model.views_ncc.empty()) return nullptr;
            return &model.views_ncc[static_cast<std::size_t>(rng.below(model.views_ncc.size()))];
          };
          auto pick_neighbor = [&]() -> const PointCloud* {
            auto it = data.graph.neighbors.find(model.id);
            if (it == data.graph.neighbors.end() || it->second.empty()) return nullptr;
            const auto& entry = it->second[static_cast<std::size_t>(rng.below(it->second.size()))];
            const TrainModel* nb = data.find(entry.id);
            return nb ? &nb->ncc : nullptr;
          };
          if (r < phase.frac_same) {
            x = pick_view();
            y = &model.ncc;
          } else if (r < phase.frac_same + phase.frac_model_neighbor) {
            x = &model.ncc;
            y = pick_neighbor();
            tau = cfg.tau_cross;
          } else {
            x = pick_view();
            y = pick_neighbor();
            tau = cfg.tau_cross;
          }
          std::uint64_t pair_seed = rng.u64();
          if (!x || !y || x->empty() || y->empty()) continue;

          MatchSet full = positive_pairs(*x, *y, tau);
          std::size_t avail = full.pairs.size();
          if (avail == 0) continue;  // nothing to align for this draw
          std::size_t n_pos = std::min(cfg.n_pos, avail);
          MatchSet ms = sample_pairs(full, n_pos, cfg.n_neg, *x, *y, pair_seed,
                                     {tau, cfg.negative_margin});

          ForwardTrace tx, ty;
          FeatureSet fx = net_forward(net, *x, &tx);
          FeatureSet fy = net_forward(net, *y, &ty);
          BatchLoss bl = batch_loss(fx, fy, ms, cfg);
          if (!std::isfinite(bl.loss))
            fail(ErrorCode::TrainingDiverged, "non-finite loss at epoch " + std::to_string(global_epoch));

          NetGradients grads = net_backward(net, tx, bl.grad_x);
          grads += net_backward(net, ty, bl.grad_y);
          Eigen::VectorXd flat = flatten_gradients(net, grads);
          velocity = cfg.momentum * velocity - lr * flat;
          Eigen::VectorXd params = flatten_parameters(net) + velocity;
          check_finite(params);
          unflatten_parameters(net, params);

          stats.mean_pos_loss += bl.mean_pos;
          stats.mean_neg_loss += bl.mean_neg;
          stats.mean_loss += bl.loss;
          stats.steps += 1;
        }
      }
      if (stats.steps > 0) {
        stats.mean_pos_loss /= stats.steps;
        stats.mean_neg_loss /= stats.steps;
        stats.mean_loss /= stats.steps;
      }
      result.history.push_back(stats);
    }
    if (on_phase_end) on_phase_end(static_cast<int>(phase_idx), net);
  }
  result.net = std::move(net);
  return result;
}

inline std::string loss_history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream out;
  out << "epoch,phase,mean_pos_loss,mean_neg_loss,mean_loss,learning_rate,steps\n";
  for (const auto& s : history) {
    out << s.epoch << ',' << s.phase << ',' << format_double(s.mean_pos_loss) << ','
        << format_double(s.mean_neg_loss) << ',' << format_double(s.mean_loss) << ','
        << format_double(s.learning_rate) << ',' << s.steps << '\n';
  }
  return out.str();
}

}  // namespace canonreg
