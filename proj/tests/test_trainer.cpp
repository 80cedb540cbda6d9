#include <catch2/catch_amalgamated.hpp>

#include "canonreg/synthgen.hpp"
#include "canonreg/trainer.hpp"

using namespace canonreg;

namespace {

// Two unit vectors exactly d apart (0 <= d <= 2).
std::pair<Eigen::VectorXd, Eigen::VectorXd> unit_pair_at_distance(double d, int dim = 8) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(dim), v = Eigen::VectorXd::Zero(dim);
  u(0) = 1.0;
  double c = 1.0 - d * d / 2.0;
  v(0) = c;
  v(1) = std::sqrt(std::max(0.0, 1.0 - c * c));
  return {u, v};
}

FeatureSet features_from(const Eigen::MatrixXd& m) {
  FeatureSet fs;
  fs.features = m;
  return fs;
}

TrainingSet tiny_training_set(Rng& rng, int n_models) {
  TrainingSet set;
  for (int m = 0; m < n_models; ++m) {
    ShapeParams params = random_shape_params(rng);
    params.seed = 1000 + static_cast<std::uint64_t>(m);
    PointCloud cloud = generate_model(params, 400);
    TrainModel tm;
    tm.id = "t" + std::to_string(m);
    tm.ncc = to_ncc(canonical_posed(cloud));
    for (int v = 0; v < 2; ++v) {
      Rng sub = Rng::substream(params.seed, "view" + std::to_string(v));
      tm.views_ncc.push_back(sample_points(tm.ncc, 200, sub));
    }
    set.models.push_back(std::move(tm));
  }
  for (const auto& a : set.models) {
    std::vector<NeighborEntry> entries;
    for (const auto& b : set.models)
      if (a.id != b.id) entries.push_back({b.id, 1.0});
    set.graph.neighbors[a.id] = entries;
  }
  return set;
}

NetConfig tiny_net_config(std::uint64_t seed) {
  NetConfig cfg;
  cfg.voxel = 0.05;
  cfg.feature_dim = 8;
  cfg.enc_channels = 6;
  cfg.bottleneck_channels = 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("contrastive_loss", "[trainer]") {
  TrainConfig cfg;

  SECTION("matched pair at distance p_pos costs nothing") {
    auto [u, v] = unit_pair_at_distance(0.1);
    REQUIRE(contrastive_loss(u, v, true, cfg) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("matched pair at distance zero costs (0 - 0.1)^2") {
    auto [u, v] = unit_pair_at_distance(0.0);
    REQUIRE(contrastive_loss(u, v, true, cfg) == Catch::Approx(0.01).margin(1e-12));
  }

  SECTION("unmatched pair at distance p_neg costs nothing") {
    auto [u, v] = unit_pair_at_distance(1.4);
    REQUIRE(contrastive_loss(u, v, false, cfg) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("never negative, zero exactly at the thresholds") {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
      double d = rng.uniform(0.0, 2.0);
      auto [u, v] = unit_pair_at_distance(d);
      REQUIRE(contrastive_loss(u, v, true, cfg) >= 0.0);
      REQUIRE(contrastive_loss(u, v, false, cfg) >= 0.0);
    }
  }

  SECTION("hinged variant clamps the inactive side") {
    TrainConfig hinged = cfg;
    hinged.hinged = true;
    auto [u, v] = unit_pair_at_distance(0.05);  // inside p_pos
    REQUIRE(contrastive_loss(u, v, true, hinged) == 0.0);
    auto [a, b] = unit_pair_at_distance(1.8);  // beyond p_neg
    REQUIRE(contrastive_loss(a, b, false, hinged) == 0.0);
    // and matches the literal form where active
    auto [c, e] = unit_pair_at_distance(0.9);
    REQUIRE(contrastive_loss(c, e, true, hinged) ==
            Catch::Approx(contrastive_loss(c, e, true, cfg)).margin(1e-12));
  }

  SECTION("config invariant 0 <= p_pos < p_neg <= 2") {
    TrainConfig bad = cfg;
    bad.p_neg = 2.5;
    REQUIRE_THROWS_MATCHES(bad.validate(), Error, Catch::Matchers::Predicate<Error>(
        [](const Error& e) { return e.code() == ErrorCode::BadParameter; }));
    bad = cfg;
    bad.p_pos = 1.5;
    bad.p_neg = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), Error);
  }
}

TEST_CASE("batch_loss", "[trainer]") {
  TrainConfig cfg;

  SECTION("pairs at their target distances give zero loss and gradients") {
    auto [up, vp] = unit_pair_at_distance(cfg.p_pos);
    auto [un, vn] = unit_pair_at_distance(cfg.p_neg);
    Eigen::MatrixXd fx(2, 8), fy(2, 8);
    fx.row(0) = up.transpose();
    fy.row(0) = vp.transpose();
    fx.row(1) = un.transpose();
    fy.row(1) = vn.transpose();
    MatchSet ms;
    ms.pairs = {{0, 0, PairLabel::Positive}, {1, 1, PairLabel::Negative}};
    BatchLoss bl = batch_loss(features_from(fx), features_from(fy), ms, cfg);
    REQUIRE(bl.loss == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(bl.grad_x.cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE(bl.grad_y.cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("a single positive pair pulls features together iff d > p_pos") {
    for (double d : {0.5, 0.05}) {
      auto [u, v] = unit_pair_at_distance(d);
      Eigen::MatrixXd fx(1, 8), fy(1, 8);
      fx.row(0) = u.transpose();
      fy.row(0) = v.transpose();
      MatchSet ms;
      ms.pairs = {{0, 0, PairLabel::Positive}};
      BatchLoss bl = batch_loss(features_from(fx), features_from(fy), ms, cfg);
      double toward = (-bl.grad_x.row(0)).dot(fy.row(0) - fx.row(0));
      if (d > cfg.p_pos) REQUIRE(toward > 0.0);   // descent moves fx toward fy
      else REQUIRE(toward < 0.0);                 // inside p_pos the literal loss pushes apart
    }
  }

  SECTION("gradients match finite differences on a random 64-pair batch") {
    Rng rng(7);
    int nx = 40, ny = 35, dim = 8;
    Eigen::MatrixXd fx(nx, dim), fy(ny, dim);
    for (Eigen::Index r = 0; r < fx.rows(); ++r) {
      Eigen::VectorXd v(dim);
      for (int c = 0; c < dim; ++c) v(c) = rng.normal();
      fx.row(r) = v.normalized().transpose();
    }
    for (Eigen::Index r = 0; r < fy.rows(); ++r) {
      Eigen::VectorXd v(dim);
      for (int c = 0; c < dim; ++c) v(c) = rng.normal();
      fy.row(r) = v.normalized().transpose();
    }
    MatchSet ms;
    for (int p = 0; p < 64; ++p)
      ms.pairs.push_back({static_cast<std::size_t>(rng.below(nx)), static_cast<std::size_t>(rng.below(ny)),
                          p % 2 == 0 ? PairLabel::Positive : PairLabel::Negative});

    BatchLoss bl = batch_loss(features_from(fx), features_from(fy), ms, cfg);
    const double h = 1e-7;
    for (int trial = 0; trial < 40; ++trial) {
      bool on_x = rng.unit() < 0.5;
      Eigen::MatrixXd& target = on_x ? fx : fy;
      Eigen::Index r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(target.rows())));
      Eigen::Index c = static_cast<Eigen::Index>(rng.below(dim));
      Eigen::MatrixXd plus = target, minus = target;
      plus(r, c) += h;
      minus(r, c) -= h;
      double lp = on_x ? batch_loss(features_from(plus), features_from(fy), ms, cfg).loss
                       : batch_loss(features_from(fx), features_from(plus), ms, cfg).loss;
      double lm = on_x ? batch_loss(features_from(minus), features_from(fy), ms, cfg).loss
                       : batch_loss(features_from(fx), features_from(minus), ms, cfg).loss;
      double fd = (lp - lm) / (2 * h);
      double an = on_x ? bl.grad_x(r, c) : bl.grad_y(r, c);
      REQUIRE(std::abs(fd - an) <= 1e-5 * std::max({1.0, std::abs(fd), std::abs(an)}));
    }
  }

  SECTION("empty match set fails") {
    Eigen::MatrixXd f = Eigen::MatrixXd::Identity(4, 8);
    REQUIRE_THROWS_MATCHES(batch_loss(features_from(f), features_from(f), MatchSet{}, cfg), Error,
                           Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::InsufficientPairs;
                           }));
  }
}

TEST_CASE("train", "[trainer]") {
  Rng rng(11);
  TrainingSet set = tiny_training_set(rng, 3);

  TrainConfig cfg;
  cfg.n_pos = 128;
  cfg.n_neg = 128;
  cfg.seed = 5;

  SECTION("zero epochs changes nothing") {
    cfg.epochs_per_phase = {0};
    FeatureNet net = make_feature_net(tiny_net_config(3));
    Eigen::VectorXd before = flatten_parameters(net);
    TrainResult res = train(set, net, {{"same_instance", 1.0, 0.0, 0.0}}, cfg);
    REQUIRE(res.history.empty());
    REQUIRE((flatten_parameters(res.net) - before).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("five same-instance epochs reduce the mean loss") {
    cfg.epochs_per_phase = {5};
    TrainResult res = train(set, make_feature_net(tiny_net_config(3)),
                            {{"same_instance", 1.0, 0.0, 0.0}}, cfg);
    REQUIRE(res.history.size() == 5);
    REQUIRE(res.history.back().mean_loss < res.history.front().mean_loss);
  }

  SECTION("same seed reproduces the parameters bitwise") {
    cfg.epochs_per_phase = {2};
    auto schedule = default_schedule();
    TrainResult a = train(set, make_feature_net(tiny_net_config(3)), schedule, cfg);
    TrainResult b = train(set, make_feature_net(tiny_net_config(3)), schedule, cfg);
    REQUIRE((flatten_parameters(a.net) - flatten_parameters(b.net)).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("non-finite loss raises TrainingDiverged with the epoch index") {
    cfg.epochs_per_phase = {1};
    FeatureNet net = make_feature_net(tiny_net_config(3));
    Eigen::VectorXd params = flatten_parameters(net);
    params(0) = std::numeric_limits<double>::quiet_NaN();
    unflatten_parameters(net, params);
    try {
      train(set, net, {{"same_instance", 1.0, 0.0, 0.0}}, cfg);
      FAIL("expected TrainingDiverged");
    } catch (const Error& e) {
      REQUIRE(e.code() == ErrorCode::TrainingDiverged);
      REQUIRE(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }

  SECTION("phase fractions must sum to one") {
    cfg.epochs_per_phase = {1};
    REQUIRE_THROWS_AS(train(set, make_feature_net(tiny_net_config(3)),
                            {{"broken", 0.5, 0.0, 0.0}}, cfg),
                      Error);
  }
}

TEST_CASE("loss history CSV", "[trainer]") {
  std::vector<EpochStats> history(2);
  history[0] = {0, 0, 0.5, 1.5, 2.0, 0.125, 3};
  history[1] = {1, 1, 0.25, 1.0, 1.25, 0.125, 3};
  std::string csv = loss_history_csv(history);
  REQUIRE(csv.find("epoch,phase,mean_pos_loss,mean_neg_loss,mean_loss,learning_rate,steps") == 0);
  REQUIRE(csv.find("\n0,0,0.5,1.5,2,0.125,3\n") != std::string::npos);
}
