#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "canonreg/sparse.hpp"

namespace canonreg {

/// One feature row per point of the originating cloud; rows unit-norm.
struct FeatureSet {
  Eigen::MatrixXd features;  // N x k
  PointCloud source;
};

struct ReluLayer {};
struct SkipSaveLayer {};
struct SkipConcatLayer {};
struct NormalizeLayer {};

/// Two stride-1 convolutions with an identity shortcut:
/// y = relu(x + conv2(relu(conv1(x)))). Coordinate set is preserved.
struct ResBlock {
  sparse::ConvLayer conv1;
  sparse::ConvLayer conv2;
};

using NetLayer =
    std::variant<sparse::ConvLayer, ResBlock, ReluLayer, SkipSaveLayer, SkipConcatLayer, NormalizeLayer>;

struct NetConfig {
  double voxel = 0.025;  // NCC units
  int feature_dim = 32;
  int enc_channels = 32;
  int bottleneck_channels = 64;
  bool bias = true;
  std::uint64_t seed = 0;
};

/// Fully-convolutional sparse residual encoder-decoder emitting unit-norm
/// per-point features.
struct FeatureNet {
  std::vector<NetLayer> layers;
  double voxel = 0.025;
  int output_dim = 32;
  std::uint64_t seed = 0;
};

namespace detail {

inline ResBlock make_res_block(int channels, bool bias, Rng& rng) {
  ResBlock b;
  b.conv1 = sparse::make_conv_layer(channels, channels, 3, 1, false, bias, rng);
  b.conv2 = sparse::make_conv_layer(channels, channels, 3, 1, false, bias, rng);
  return b;
}

}  // namespace detail

/// Encoder [conv3, resblock, stride-2 conv3, resblock], decoder
/// [transposed stride-2 conv3, resblock, conv1], one skip concatenation at
/// stride 1, ReLU nonlinearities, final L2 row normalization.
inline FeatureNet make_feature_net(const NetConfig& cfg) {
  require(cfg.feature_dim >= 1, ErrorCode::BadParameter, "feature dim must be positive");
  Rng rng = Rng::substream(cfg.seed, "net-init");
  FeatureNet net;
  net.voxel = cfg.voxel;
  net.output_dim = cfg.feature_dim;
  net.seed = cfg.seed;
  const int c1 = cfg.enc_channels, c2 = cfg.bottleneck_channels;
  net.layers.emplace_back(sparse::make_conv_layer(1, c1, 3, 1, false, cfg.bias, rng));
  net.layers.emplace_back(ReluLayer{});
  net.layers.emplace_back(detail::make_res_block(c1, cfg.bias, rng));
  net.layers.emplace_back(SkipSaveLayer{});
  net.layers.emplace_back(sparse::make_conv_layer(c1, c2, 3, 2, false, cfg.bias, rng));
  net.layers.emplace_back(ReluLayer{});
  net.layers.emplace_back(detail::make_res_block(c2, cfg.bias, rng));
  net.layers.emplace_back(sparse::make_conv_layer(c2, c1, 3, 2, true, cfg.bias, rng));
  net.layers.emplace_back(ReluLayer{});
  net.layers.emplace_back(SkipConcatLayer{});
  net.layers.emplace_back(detail::make_res_block(2 * c1, cfg.bias, rng));
  net.layers.emplace_back(sparse::make_conv_layer(2 * c1, cfg.feature_dim, 1, 1, false, cfg.bias, rng));
  net.layers.emplace_back(NormalizeLayer{});
  return net;
}

// ---------------------------------------------------------------------------
// Forward with a cache for reverse-mode gradients.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvTrace {
  Eigen::MatrixXd in_feats;
  sparse::KernelMap map;
};

struct ResTrace {
  Eigen::MatrixXd in_feats;
  sparse::KernelMap map;  // shared by both convs (stride 1, same coords)
  Eigen::MatrixXd mid_pre;
  Eigen::MatrixXd mid_post;
  Eigen::MatrixXd sum_pre;
};

struct ReluTrace {
  Eigen::MatrixXd pre;
};

struct NormTrace {
  Eigen::MatrixXd pre;
  Eigen::VectorXd norms;
};

struct SkipSaveTrace {};

struct SkipConcatTrace {
  Eigen::Index current_cols = 0;
  Eigen::Index saved_cols = 0;
};

using LayerTrace = std::variant<ConvTrace, ResTrace, ReluTrace, NormTrace, SkipSaveTrace, SkipConcatTrace>;

inline Eigen::MatrixXd relu(const Eigen::MatrixXd& x) { return x.cwiseMax(0.0); }

inline Eigen::MatrixXd relu_backward(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& grad) {
  return (pre.array() > 0.0).cast<double>() * grad.array();
}

}  // namespace detail

/// Cached intermediate state of one net_forward call; consumed by
/// net_backward. Tied to the exact FeatureNet instance that produced it.
struct ForwardTrace {
  const FeatureNet* net = nullptr;
  std::vector<detail::LayerTrace> layer_traces;
  std::vector<std::size_t> point_to_row;
  Eigen::MatrixXd voxel_features;  // rows = coordinate rows at output
};

/// Per-conv-layer gradients in declaration order (ResBlock contributes two).
struct NetGradients {
  std::vector<sparse::ConvGradients> convs;

  NetGradients& operator+=(const NetGradients& other) {
    require(convs.size() == other.convs.size(), ErrorCode::ShapeError, "gradient arity mismatch");
    for (std::size_t i = 0; i < convs.size(); ++i) {
      for (std::size_t k = 0; k < convs[i].weights.size(); ++k)
        convs[i].weights[k] += other.convs[i].weights[k];
      if (convs[i].bias) *convs[i].bias += *other.convs[i].bias;
    }
    return *this;
  }
};

template <typename Fn>
void for_each_conv(FeatureNet& net, Fn&& fn) {
  for (auto& layer : net.layers) {
    if (auto* conv = std::get_if<sparse::ConvLayer>(&layer)) {
      fn(*conv);
    } else if (auto* block = std::get_if<ResBlock>(&layer)) {
      fn(block->conv1);
      fn(block->conv2);
    }
  }
}

template <typename Fn>
void for_each_conv(const FeatureNet& net, Fn&& fn) {
  for (const auto& layer : net.layers) {
    if (const auto* conv = std::get_if<sparse::ConvLayer>(&layer)) {
      fn(*conv);
    } else if (const auto* block = std::get_if<ResBlock>(&layer)) {
      fn(block->conv1);
      fn(block->conv2);
    }
  }
}

inline NetGradients zero_gradients(const FeatureNet& net) {
  NetGradients g;
  for_each_conv(net, [&](const sparse::ConvLayer& conv) {
    sparse::ConvGradients cg;
    cg.setZero(conv);
    g.convs.push_back(std::move(cg));
  });
  return g;
}

inline std::size_t parameter_count(const FeatureNet& net) {
  std::size_t n = 0;
  for_each_conv(net, [&](const sparse::ConvLayer& conv) { n += conv.parameter_count(); });
  return n;
}

/// Flat parameter vector: declaration order, weight blocks row-major in
/// offset order, bias after weights. The checkpoint uses the same order.
inline Eigen::VectorXd flatten_parameters(const FeatureNet& net) {
  Eigen::VectorXd out(parameter_count(net));
  Eigen::Index at = 0;
  for_each_conv(net, [&](const sparse::ConvLayer& conv) {
    for (const auto& w : conv.weights)
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) out(at++) = w(r, c);
    if (conv.bias)
      for (Eigen::Index i = 0; i < conv.bias->size(); ++i) out(at++) = (*conv.bias)(i);
  });
  return out;
}

inline void unflatten_parameters(FeatureNet& net, const Eigen::VectorXd& params) {
  require(params.size() == static_cast<Eigen::Index>(parameter_count(net)), ErrorCode::ShapeError,
          "parameter vector length mismatch");
  Eigen::Index at = 0;
  for_each_conv(net, [&](sparse::ConvLayer& conv) {
    for (auto& w : conv.weights)
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = params(at++);
    if (conv.bias)
      for (Eigen::Index i = 0; i < conv.bias->size(); ++i) (*conv.bias)(i) = params(at++);
  });
}

inline Eigen::VectorXd flatten_gradients(const FeatureNet& net, const NetGradients& grads) {
  Eigen::VectorXd out(parameter_count(net));
  Eigen::Index at = 0;
  std::size_t ci = 0;
  for_each_conv(net, [&](const sparse::ConvLayer& conv) {
    const auto& cg = grads.convs[ci++];
    for (const auto& w : cg.weights)
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) out(at++) = w(r, c);
    if (conv.bias)
      for (Eigen::Index i = 0; i < cg.bias->size(); ++i) out(at++) = (*cg.bias)(i);
  });
  return out;
}

/// Runs the network on a point cloud: quantize at the net's voxel size,
/// sparse forward, then broadcast voxel features back to every input point.
inline FeatureSet net_forward(const FeatureNet& net, const PointCloud& cloud, ForwardTrace* trace = nullptr) {
  auto quant = sparse::quantize(cloud, net.voxel);
  sparse::SparseTensor current = std::move(quant.tensor);

  std::vector<sparse::SparseTensor> skip_stack;
  ForwardTrace local;
  ForwardTrace& t = trace ? *trace : local;
  t.net = &net;
  t.layer_traces.clear();
  t.point_to_row = quant.point_to_row;

  for (const auto& layer : net.layers) {
    if (const auto* conv = std::get_if<sparse::ConvLayer>(&layer)) {
      const std::vector<sparse::Coord>* target = nullptr;
      if (conv->transposed) {
        require(!skip_stack.empty(), ErrorCode::StateError, "transposed conv without saved target coords");
        target = &skip_stack.back().coords;
      }
      detail::ConvTrace ct;
      ct.in_feats = current.feats;
      auto [out, map] = sparse::conv_apply(current, *conv, target);
      ct.map = std::move(map);
      current = std::move(out);
      t.layer_traces.emplace_back(std::move(ct));
    } else if (const auto* block = std::get_if<ResBlock>(&layer)) {
      detail::ResTrace rt;
      rt.in_feats = current.feats;
      rt.map = sparse::build_kernel_map(current.coords, block->conv1.kernel_size, 1, false);
      rt.mid_pre = sparse::conv_forward(current.feats, block->conv1, rt.map);
      rt.mid_post = detail::relu(rt.mid_pre);
      rt.sum_pre = current.feats + sparse::conv_forward(rt.mid_post, block->conv2, rt.map);
      current.feats = detail::relu(rt.sum_pre);
      t.layer_traces.emplace_back(std::move(rt));
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      detail::ReluTrace rt;
      rt.pre = current.feats;
      current.feats = detail::relu(current.feats);
      t.layer_traces.emplace_back(std::move(rt));
    } else if (std::holds_alternative<SkipSaveLayer>(layer)) {
      skip_stack.push_back(current);
      t.layer_traces.emplace_back(detail::SkipSaveTrace{});
    } else if (std::holds_alternative<SkipConcatLayer>(layer)) {
      require(!skip_stack.empty(), ErrorCode::StateError, "skip concat without saved tensor");
      sparse::SparseTensor saved = std::move(skip_stack.back());
      skip_stack.pop_back();
      require(saved.coords == current.coords, ErrorCode::ShapeError,
              "skip concat coordinate sets differ");
      detail::SkipConcatTrace sc;
      sc.current_cols = current.feats.cols();
      sc.saved_cols = saved.feats.cols();
      Eigen::MatrixXd joined(current.feats.rows(), sc.current_cols + sc.saved_cols);
      joined << current.feats, saved.feats;
      current.feats = std::move(joined);
      t.layer_traces.emplace_back(sc);
    } else if (std::holds_alternative<NormalizeLayer>(layer)) {
      detail::NormTrace nt;
      nt.pre = current.feats;
      nt.norms = current.feats.rowwise().norm();
      for (Eigen::Index r = 0; r < current.feats.rows(); ++r) {
        double n = std::max(nt.norms(r), 1e-12);
        current.feats.row(r) /= n;
      }
      t.layer_traces.emplace_back(std::move(nt));
    }
  }
  require(current.feats.cols() == net.output_dim, ErrorCode::ShapeError,
          "network output dimension mismatch");

  t.voxel_features = current.feats;
  FeatureSet fs;
  fs.source = cloud;
  fs.features.resize(static_cast<Eigen::Index>(cloud.size()), net.output_dim);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    fs.features.row(static_cast<Eigen::Index>(i)) = current.feats.row(static_cast<Eigen::Index>(t.point_to_row[i]));
  return fs;
}

/// Reverse-mode gradients of a scalar loss given its gradient on the
/// per-point features returned by net_forward.
inline NetGradients net_backward(const FeatureNet& net, const ForwardTrace& trace,
                                 const Eigen::MatrixXd& grad_point_features) {
  require(trace.net == &net && trace.layer_traces.size() == net.layers.size(), ErrorCode::StateError,
          "forward trace does not belong to this network");
  require(grad_point_features.rows() == static_cast<Eigen::Index>(trace.point_to_row.size()) &&
              grad_point_features.cols() == net.output_dim,
          ErrorCode::ShapeError, "feature gradient shape mismatch");

  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(trace.voxel_features.rows(), net.output_dim);
  for (std::size_t i = 0; i < trace.point_to_row.size(); ++i)
    grad.row(static_cast<Eigen::Index>(trace.point_to_row[i])) +=
        grad_point_features.row(static_cast<Eigen::Index>(i));

  NetGradients grads = zero_gradients(net);
  std::size_t conv_slot = grads.convs.size();
  std::vector<Eigen::MatrixXd> pending_skip_grads;

  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& layer = net.layers[li];
    const auto& lt = trace.layer_traces[li];
    if (const auto* conv = std::get_if<sparse::ConvLayer>(&layer)) {
      const auto& ct = std::get<detail::ConvTrace>(lt);
      auto res = sparse::conv_backward(ct.in_feats, *conv, ct.map, grad);
      grads.convs[--conv_slot] = std::move(res.grads);
      grad = std::move(res.grad_in);
    } else if (const auto* block = std::get_if<ResBlock>(&layer)) {
      const auto& rt = std::get<detail::ResTrace>(lt);
      Eigen::MatrixXd g_sum = detail::relu_backward(rt.sum_pre, grad);
      auto res2 = sparse::conv_backward(rt.mid_post, block->conv2, rt.map, g_sum);
      grads.convs[--conv_slot] = std::move(res2.grads);
      Eigen::MatrixXd g_mid = detail::relu_backward(rt.mid_pre, res2.grad_in);
      auto res1 = sparse::conv_backward(rt.in_feats, block->conv1, rt.map, g_mid);
      grads.convs[--conv_slot] = std::move(res1.grads);
      grad = g_sum + res1.grad_in;
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      const auto& rt = std::get<detail::ReluTrace>(lt);
      grad = detail::relu_backward(rt.pre, grad);
    } else if (std::holds_alternative<SkipSaveLayer>(layer)) {
      require(!pending_skip_grads.empty(), ErrorCode::StateError, "unmatched skip save in backward");
      grad += pending_skip_grads.back();
      pending_skip_grads.pop_back();
    } else if (std::holds_alternative<SkipConcatLayer>(layer)) {
      const auto& sc = std::get<detail::SkipConcatTrace>(lt);
      pending_skip_grads.push_back(grad.rightCols(sc.saved_cols));
      grad = grad.leftCols(sc.current_cols).eval();
    } else if (std::holds_alternative<NormalizeLayer>(layer)) {
      const auto& nt = std::get<detail::NormTrace>(lt);
      Eigen::MatrixXd out(grad.rows(), grad.cols());
      for (Eigen::Index r = 0; r < grad.rows(); ++r) {
        double n = std::max(nt.norms(r), 1e-12);
        Eigen::RowVectorXd y = nt.pre.row(r) / n;
        Eigen::RowVectorXd g = grad.row(r);
        out.row(r) = (g - (g.dot(y)) * y) / n;
      }
      grad = std::move(out);
    }
  }
  require(conv_slot == 0, ErrorCode::StateError, "gradient slots out of sync");
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoint: version byte, little-endian u32 JSON header length, JSON header
// (architecture, voxel size, k, seed), then little-endian float64 parameter
// blocks in declaration order.
// ---------------------------------------------------------------------------

inline constexpr unsigned char kCheckpointVersion = 1;

inline nlohmann::json net_arch_json(const FeatureNet& net) {
  nlohmann::json arch = nlohmann::json::array();
  for (const auto& layer : net.layers) {
    if (const auto* conv = std::get_if<sparse::ConvLayer>(&layer)) {
      arch.push_back({{"type", "conv"},
                      {"in", conv->in_channels},
                      {"out", conv->out_channels},
                      {"kernel", conv->kernel_size},
                      {"stride", conv->stride},
                      {"transposed", conv->transposed},
                      {"bias", conv->bias.has_value()}});
    } else if (const auto* block = std::get_if<ResBlock>(&layer)) {
      arch.push_back({{"type", "resblock"},
                      {"channels", block->conv1.in_channels},
                      {"kernel", block->conv1.kernel_size},
                      {"bias", block->conv1.bias.has_value()}});
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      arch.push_back({{"type", "relu"}});
    } else if (std::holds_alternative<SkipSaveLayer>(layer)) {
      arch.push_back({{"type", "skip_save"}});
    } else if (std::holds_alternative<SkipConcatLayer>(layer)) {
      arch.push_back({{"type", "skip_concat"}});
    } else {
      arch.push_back({{"type", "normalize"}});
    }
  }
  return arch;
}

inline FeatureNet net_from_arch_json(const nlohmann::json& header) {
  FeatureNet net;
  net.voxel = header.at("voxel").get<double>();
  net.output_dim = header.at("k").get<int>();
  net.seed = header.at("seed").get<std::uint64_t>();
  Rng rng(0);  // placeholder weights; overwritten by the parameter block
  for (const auto& l : header.at("arch")) {
    std::string type = l.at("type").get<std::string>();
    if (type == "conv") {
      net.layers.emplace_back(sparse::make_conv_layer(l.at("in").get<int>(), l.at("out").get<int>(),
                                                      l.at("kernel").get<int>(), l.at("stride").get<int>(),
                                                      l.at("transposed").get<bool>(),
                                                      l.at("bias").get<bool>(), rng));
    } else if (type == "resblock") {
      ResBlock b;
      int ch = l.at("channels").get<int>();
      bool bias = l.at("bias").get<bool>();
      b.conv1 = sparse::make_conv_layer(ch, ch, l.at("kernel").get<int>(), 1, false, bias, rng);
      b.conv2 = sparse::make_conv_layer(ch, ch, l.at("kernel").get<int>(), 1, false, bias, rng);
      net.layers.emplace_back(std::move(b));
    } else if (type == "relu") {
      net.layers.emplace_back(ReluLayer{});
    } else if (type == "skip_save") {
      net.layers.emplace_back(SkipSaveLayer{});
    } else if (type == "skip_concat") {
      net.layers.emplace_back(SkipConcatLayer{});
    } else if (type == "normalize") {
      net.layers.emplace_back(NormalizeLayer{});
    } else {
      fail(ErrorCode::IoError, "unknown layer type in checkpoint: " + type);
    }
  }
  return net;
}

inline void append_le_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void append_le_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

inline void save_checkpoint(const std::filesystem::path& path, const FeatureNet& net) {
  nlohmann::json header;
  header["arch"] = net_arch_json(net);
  header["voxel"] = net.voxel;
  header["k"] = net.output_dim;
  header["seed"] = net.seed;
  header["dtype"] = "float64-le";
  std::string header_text = header.dump();

  std::string blob;
  blob.push_back(static_cast<char>(kCheckpointVersion));
  append_le_u32(blob, static_cast<std::uint32_t>(header_text.size()));
  blob += header_text;
  Eigen::VectorXd params = flatten_parameters(net);
  blob.reserve(blob.size() + static_cast<std::size_t>(params.size()) * 8);
  for (Eigen::Index i = 0; i < params.size(); ++i) append_le_f64(blob, params(i));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot write checkpoint: " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  require(out.good(), ErrorCode::IoError, "checkpoint write failed: " + path.string());
}

inline FeatureNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot read checkpoint: " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(blob.size() >= 5, ErrorCode::IoError, "checkpoint too short: " + path.string());
  require(static_cast<unsigned char>(blob[0]) == kCheckpointVersion, ErrorCode::IoError,
          "unsupported checkpoint version in " + path.string());
  std::uint32_t header_len = 0;
  for (int b = 0; b < 4; ++b) header_len |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[1 + b])) << (8 * b);
  require(blob.size() >= 5 + header_len, ErrorCode::IoError, "truncated checkpoint header: " + path.string());
  nlohmann::json header = nlohmann::json::parse(blob.substr(5, header_len), nullptr, false);
  require(!header.is_discarded(), ErrorCode::IoError, "malformed checkpoint header: " + path.string());

  FeatureNet net = net_from_arch_json(header);
  std::size_t n_params = parameter_count(net);
  require(blob.size() == 5 + header_len + n_params * 8, ErrorCode::IoError,
          "checkpoint parameter block size mismatch: " + path.string());
  Eigen::VectorXd params(static_cast<Eigen::Index>(n_params));
  const char* base = blob.data() + 5 + header_len;
  for (std::size_t i = 0; i < n_params; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(base[i * 8 + b])) << (8 * b);
    double v;
    std::memcpy(&v, &bits, 8);
    params(static_cast<Eigen::Index>(i)) = v;
  }
  unflatten_parameters(net, params);
  return net;
}

}  // namespace canonreg
