#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "canonreg/io.hpp"
#include "canonreg/net.hpp"

using namespace canonreg;

namespace {

PointCloud random_cloud(Rng& rng, std::size_t n, double extent = 0.5) {
  PointCloud cloud;
  for (std::size_t i = 0; i < n; ++i)
    cloud.points.push_back(Vec3(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                                rng.uniform(-extent, extent)));
  return cloud;
}

NetConfig small_config(std::uint64_t seed) {
  NetConfig cfg;
  cfg.voxel = 0.1;
  cfg.feature_dim = 8;
  cfg.enc_channels = 6;
  cfg.bottleneck_channels = 10;
  cfg.bias = true;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("net_forward output contract", "[net]") {
  Rng rng(1);
  FeatureNet net = make_feature_net(small_config(11));
  PointCloud cloud = random_cloud(rng, 120);

  SECTION("one unit-norm feature per input point") {
    FeatureSet fs = net_forward(net, cloud);
    REQUIRE(fs.features.rows() == static_cast<Eigen::Index>(cloud.size()));
    REQUIRE(fs.features.cols() == net.output_dim);
    for (Eigen::Index r = 0; r < fs.features.rows(); ++r)
      REQUIRE(fs.features.row(r).norm() == Catch::Approx(1.0).margin(1e-6));
  }

  SECTION("permuting the input permutes the features identically") {
    FeatureSet base = net_forward(net, cloud);
    std::vector<std::size_t> perm(cloud.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    PointCloud shuffled;
    for (std::size_t i : perm) shuffled.points.push_back(cloud.points[i]);
    FeatureSet out = net_forward(net, shuffled);
    for (std::size_t i = 0; i < perm.size(); ++i)
      REQUIRE((out.features.row(static_cast<Eigen::Index>(i)) -
               base.features.row(static_cast<Eigen::Index>(perm[i])))
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
  }

  SECTION("translation by a voxel-stride multiple leaves features unchanged") {
    FeatureSet base = net_forward(net, cloud);
    // total stride of the encoder is 2, so shift by voxel * 2 per axis
    Vec3 shift = net.voxel * 2.0 * Vec3(3, -1, 2);
    PointCloud moved = cloud;
    for (auto& p : moved.points) p += shift;
    FeatureSet out = net_forward(net, moved);
    REQUIRE((out.features - base.features).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("net_backward finite differences", "[net]") {
  Rng rng(2);
  FeatureNet net = make_feature_net(small_config(23));
  PointCloud cloud = random_cloud(rng, 60);

  ForwardTrace trace;
  FeatureSet fs = net_forward(net, cloud, &trace);

  Eigen::MatrixXd upstream(fs.features.rows(), fs.features.cols());
  for (Eigen::Index r = 0; r < upstream.rows(); ++r)
    for (Eigen::Index c = 0; c < upstream.cols(); ++c) upstream(r, c) = rng.normal();

  SECTION("zero upstream gradient gives zero parameter gradients") {
    NetGradients grads = net_backward(net, trace, Eigen::MatrixXd::Zero(upstream.rows(), upstream.cols()));
    REQUIRE(flatten_gradients(net, grads).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("matches central differences on random parameters") {
    NetGradients grads = net_backward(net, trace, upstream);
    Eigen::VectorXd analytic = flatten_gradients(net, grads);
    Eigen::VectorXd params = flatten_parameters(net);

    auto loss = [&](const Eigen::VectorXd& p) {
      FeatureNet probe = net;
      unflatten_parameters(probe, p);
      FeatureSet out = net_forward(probe, cloud);
      return (out.features.array() * upstream.array()).sum();
    };

    const double h = 1e-6;
    int checked = 0;
    for (int trial = 0; trial < 30; ++trial) {
      Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(params.size())));
      Eigen::VectorXd plus = params, minus = params;
      plus(idx) += h;
      minus(idx) -= h;
      double fd = (loss(plus) - loss(minus)) / (2 * h);
      double an = analytic(idx);
      REQUIRE(std::abs(fd - an) <= 1e-3 * std::max({1.0, std::abs(fd), std::abs(an)}));
      ++checked;
    }
    REQUIRE(checked == 30);
  }

  SECTION("a trace from another net is rejected") {
    FeatureNet other = make_feature_net(small_config(23));
    REQUIRE_THROWS_MATCHES(net_backward(other, trace, upstream), Error,
                           Catch::Matchers::Predicate<Error>(
                               [](const Error& e) { return e.code() == ErrorCode::StateError; }));
  }

  SECTION("single-conv net equals conv_backward directly") {
    FeatureNet tiny;
    tiny.voxel = 0.1;
    tiny.output_dim = 4;
    Rng wrng(5);
    tiny.layers.emplace_back(sparse::make_conv_layer(1, 4, 3, 1, false, true, wrng));
    ForwardTrace ttrace;
    FeatureSet tout = net_forward(tiny, cloud, &ttrace);

    Eigen::MatrixXd g(tout.features.rows(), 4);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < 4; ++c) g(r, c) = wrng.normal();
    NetGradients via_net = net_backward(tiny, ttrace, g);

    auto quant = sparse::quantize(cloud, tiny.voxel);
    sparse::KernelMap map = sparse::build_kernel_map(quant.tensor.coords, 3, 1, false);
    Eigen::MatrixXd voxel_grad = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(quant.tensor.size()), 4);
    for (std::size_t i = 0; i < cloud.size(); ++i)
      voxel_grad.row(static_cast<Eigen::Index>(quant.point_to_row[i])) +=
          g.row(static_cast<Eigen::Index>(i));
    auto direct = sparse::conv_backward(quant.tensor.feats, std::get<sparse::ConvLayer>(tiny.layers[0]),
                                        map, voxel_grad);
    for (std::size_t k = 0; k < direct.grads.weights.size(); ++k)
      REQUIRE((via_net.convs[0].weights[k] - direct.grads.weights[k]).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((*via_net.convs[0].bias - *direct.grads.bias).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("parameter flattening round trip", "[net]") {
  FeatureNet net = make_feature_net(small_config(31));
  Eigen::VectorXd params = flatten_parameters(net);
  REQUIRE(params.size() == static_cast<Eigen::Index>(parameter_count(net)));

  Eigen::VectorXd doubled = 2.0 * params;
  unflatten_parameters(net, doubled);
  REQUIRE((flatten_parameters(net) - doubled).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("checkpoint round trip", "[net][io]") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "canonreg_test_ckpt";
  fs::create_directories(dir);
  fs::path path = dir / "net.ckpt";

  FeatureNet net = make_feature_net(small_config(47));
  save_checkpoint(path, net);
  FeatureNet back = load_checkpoint(path);

  REQUIRE(back.voxel == net.voxel);
  REQUIRE(back.output_dim == net.output_dim);
  REQUIRE(back.seed == net.seed);
  REQUIRE(back.layers.size() == net.layers.size());
  REQUIRE((flatten_parameters(back) - flatten_parameters(net)).cwiseAbs().maxCoeff() == 0.0);

  SECTION("identical forward results") {
    Rng rng(3);
    PointCloud cloud = random_cloud(rng, 50);
    FeatureSet a = net_forward(net, cloud);
    FeatureSet b = net_forward(back, cloud);
    REQUIRE((a.features - b.features).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("saved bytes are stable") {
    fs::path path2 = dir / "net2.ckpt";
    save_checkpoint(path2, net);
    REQUIRE(read_text_file(path) == read_text_file(path2));
  }

  SECTION("truncated file is rejected") {
    std::string blob = read_text_file(path);
    write_text_file(dir / "trunc.ckpt", blob.substr(0, blob.size() / 2));
    REQUIRE_THROWS_MATCHES(load_checkpoint(dir / "trunc.ckpt"), Error,
                           Catch::Matchers::Predicate<Error>(
                               [](const Error& e) { return e.code() == ErrorCode::IoError; }));
  }
}
