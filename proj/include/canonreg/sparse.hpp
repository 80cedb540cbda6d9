#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "canonreg/geom.hpp"

namespace canonreg {
namespace sparse {

using Coord = std::array<std::int64_t, 3>;

struct CoordHash {
  std::size_t operator()(const Coord& c) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::int64_t v : c) {
      std::uint64_t u = static_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (u >> (8 * b)) & 0xff;
        h *= 0x100000001b3ull;
      }
    }
    return static_cast<std::size_t>(h);
  }
};

using CoordMap = std::unordered_map<Coord, int, CoordHash>;

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

/// Quantized coordinates with per-coordinate feature rows. Coordinates are
/// unique, sorted lexicographically (runs are bit-reproducible), and expressed
/// in this level's own cell units; `stride` records voxel units per cell.
struct SparseTensor {
  std::vector<Coord> coords;
  Eigen::MatrixXd feats;  // coords.size() x channels
  int stride = 1;

  std::size_t size() const { return coords.size(); }
  int channels() const { return static_cast<int>(feats.cols()); }

  CoordMap coord_map() const {
    CoordMap map;
    map.reserve(coords.size());
    for (std::size_t r = 0; r < coords.size(); ++r) map.emplace(coords[r], static_cast<int>(r));
    return map;
  }
};

/// floor(point / voxel) per axis, unique coords, all-ones single-channel
/// features. Also returns the point index -> coordinate row mapping.
struct QuantizeResult {
  SparseTensor tensor;
  std::vector<std::size_t> point_to_row;
};

inline QuantizeResult quantize(const PointCloud& cloud, double voxel) {
  require(voxel > 0.0, ErrorCode::BadParameter, "quantize voxel must be positive");
  require(!cloud.empty(), ErrorCode::EmptyCloud, "quantize of empty cloud");

  std::vector<Coord> raw(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    VoxelKey k = voxel_key(cloud.points[i], voxel);
    raw[i] = {k[0], k[1], k[2]};
  }
  std::vector<Coord> unique_coords = raw;
  std::sort(unique_coords.begin(), unique_coords.end());
  unique_coords.erase(std::unique(unique_coords.begin(), unique_coords.end()), unique_coords.end());

  CoordMap rows;
  rows.reserve(unique_coords.size());
  for (std::size_t r = 0; r < unique_coords.size(); ++r) rows.emplace(unique_coords[r], static_cast<int>(r));

  QuantizeResult out;
  out.tensor.coords = std::move(unique_coords);
  out.tensor.feats = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(out.tensor.coords.size()), 1);
  out.tensor.stride = 1;
  out.point_to_row.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) out.point_to_row[i] = static_cast<std::size_t>(rows.at(raw[i]));
  return out;
}

/// Unit offsets around zero with extent K per axis, lexicographic order.
inline std::vector<Coord> kernel_offsets(int kernel_size) {
  require(kernel_size >= 1 && kernel_size % 2 == 1, ErrorCode::BadParameter,
          "kernel size must be odd and >= 1");
  int r = (kernel_size - 1) / 2;
  std::vector<Coord> offsets;
  offsets.reserve(static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size);
  for (int x = -r; x <= r; ++x)
    for (int y = -r; y <= r; ++y)
      for (int z = -r; z <= r; ++z) offsets.push_back({x, y, z});
  return offsets;
}

/// Per kernel offset, the (input row, output row) gather-scatter pairs.
///
/// Non-transposed: entry under offset i satisfies c_out*stride + i = c_in;
/// stride 1 keeps C^out = C^in, stride 2 uses C^out = unique floor(C^in / 2).
/// Transposed: C^out is the caller-provided target set (the decoder mirrors
/// encoder coordinates) and entries satisfy c_in*stride + i = c_out. Target
/// coordinates with no contributing input are dropped.
struct KernelMap {
  int kernel_size = 1;
  int stride = 1;
  bool transposed = false;
  std::vector<Coord> out_coords;
  std::vector<std::vector<std::pair<int, int>>> entries;  // per offset: (in_row, out_row)

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.size();
    return n;
  }
};

inline KernelMap build_kernel_map(const std::vector<Coord>& in_coords, int kernel_size, int stride,
                                  bool transposed, const std::vector<Coord>* target_coords = nullptr) {
  require(stride == 1 || stride == 2, ErrorCode::BadParameter, "stride must be 1 or 2");
  std::vector<Coord> offsets = kernel_offsets(kernel_size);

  CoordMap in_rows;
  in_rows.reserve(in_coords.size());
  for (std::size_t r = 0; r < in_coords.size(); ++r) in_rows.emplace(in_coords[r], static_cast<int>(r));

  KernelMap map;
  map.kernel_size = kernel_size;
  map.stride = stride;
  map.transposed = transposed;

  std::vector<Coord> candidates;
  if (transposed) {
    require(target_coords != nullptr, ErrorCode::BadParameter,
            "transposed convolution needs target coordinates");
    candidates = *target_coords;
  } else if (stride == 1) {
    candidates = in_coords;
  } else {
    candidates.reserve(in_coords.size());
    for (const auto& c : in_coords)
      candidates.push_back({floor_div(c[0], stride), floor_div(c[1], stride), floor_div(c[2], stride)});
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  }

  map.entries.assign(offsets.size(), {});
  std::vector<std::vector<std::pair<int, int>>> staged(offsets.size());
  std::vector<bool> covered(candidates.size(), false);
  for (std::size_t out_row = 0; out_row < candidates.size(); ++out_row) {
    const Coord& c_out = candidates[out_row];
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      const Coord& off = offsets[k];
      Coord c_in;
      if (!transposed) {
        c_in = {c_out[0] * stride + off[0], c_out[1] * stride + off[1], c_out[2] * stride + off[2]};
      } else {
        bool divisible = true;
        for (int a = 0; a < 3 && divisible; ++a) {
          std::int64_t num = c_out[a] - off[a];
          if (num - floor_div(num, stride) * stride != 0) divisible = false;
          c_in[a] = floor_div(num, stride);
        }
        if (!divisible) continue;
      }
      auto it = in_rows.find(c_in);
      if (it == in_rows.end()) continue;
      staged[k].emplace_back(it->second, static_cast<int>(out_row));
      covered[out_row] = true;
    }
  }

  // Drop uncovered outputs and re-index rows.
  std::vector<int> new_row(candidates.size(), -1);
  for (std::size_t r = 0; r < candidates.size(); ++r) {
    if (covered[r]) {
      new_row[r] = static_cast<int>(map.out_coords.size());
      map.out_coords.push_back(candidates[r]);
    }
  }
  for (std::size_t k = 0; k < offsets.size(); ++k) {
    map.entries[k].reserve(staged[k].size());
    for (auto [in_row, out_row] : staged[k]) map.entries[k].emplace_back(in_row, new_row[out_row]);
  }
  return map;
}

/// Sparse convolution layer. Weights are K^3 matrices of shape
/// in_channels x out_channels, in the kernel_offsets order.
struct ConvLayer {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_size = 3;
  int stride = 1;
  bool transposed = false;
  std::vector<Eigen::MatrixXd> weights;
  std::optional<Eigen::VectorXd> bias;

  std::size_t offset_count() const {
    return static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
  }

  void validate() const {
    require(kernel_size >= 1 && kernel_size % 2 == 1, ErrorCode::BadParameter, "kernel size must be odd");
    require(stride == 1 || stride == 2, ErrorCode::BadParameter, "stride must be 1 or 2");
    require(weights.size() == offset_count(), ErrorCode::ShapeError, "wrong number of weight blocks");
    for (const auto& w : weights) {
      require(w.rows() == in_channels && w.cols() == out_channels, ErrorCode::ShapeError,
              "weight block shape mismatch");
      require(w.allFinite(), ErrorCode::ShapeError, "non-finite weights");
    }
    if (bias)
      require(bias->size() == out_channels, ErrorCode::ShapeError, "bias length mismatch");
  }

  std::size_t parameter_count() const {
    return offset_count() * static_cast<std::size_t>(in_channels) * out_channels +
           (bias ? static_cast<std::size_t>(out_channels) : 0);
  }
};

inline ConvLayer make_conv_layer(int in_channels, int out_channels, int kernel_size, int stride,
                                 bool transposed, bool with_bias, Rng& rng) {
  ConvLayer layer;
  layer.in_channels = in_channels;
  layer.out_channels = out_channels;
  layer.kernel_size = kernel_size;
  layer.stride = stride;
  layer.transposed = transposed;
  double bound = std::sqrt(6.0 / double(in_channels + out_channels));
  layer.weights.resize(layer.offset_count());
  for (auto& w : layer.weights) {
    w.resize(in_channels, out_channels);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
  }
  if (with_bias) layer.bias = Eigen::VectorXd::Zero(out_channels);
  layer.validate();
  return layer;
}

/// x_out_c = sum over contributing offsets of W_i^T-applied input rows, plus
/// bias on every produced row.
inline Eigen::MatrixXd conv_forward(const Eigen::MatrixXd& in_feats, const ConvLayer& layer,
                                    const KernelMap& map) {
  layer.validate();
  require(in_feats.cols() == layer.in_channels, ErrorCode::ShapeError,
          "input channel count does not match layer");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(map.out_coords.size()),
                                              layer.out_channels);
  for (std::size_t k = 0; k < map.entries.size(); ++k) {
    const auto& pairs = map.entries[k];
    if (pairs.empty()) continue;
    const Eigen::MatrixXd& w = layer.weights[k];
    for (auto [in_row, out_row] : pairs) out.row(out_row).noalias() += in_feats.row(in_row) * w;
  }
  if (layer.bias) out.rowwise() += layer.bias->transpose();
  return out;
}

struct ConvGradients {
  std::vector<Eigen::MatrixXd> weights;
  std::optional<Eigen::VectorXd> bias;

  void setZero(const ConvLayer& layer) {
    weights.assign(layer.offset_count(), Eigen::MatrixXd::Zero(layer.in_channels, layer.out_channels));
    if (layer.bias) bias = Eigen::VectorXd::Zero(layer.out_channels);
    else bias.reset();
  }
};

struct ConvBackwardResult {
  Eigen::MatrixXd grad_in;
  ConvGradients grads;
};

inline ConvBackwardResult conv_backward(const Eigen::MatrixXd& in_feats, const ConvLayer& layer,
                                        const KernelMap& map, const Eigen::MatrixXd& grad_out) {
  layer.validate();
  require(grad_out.rows() == static_cast<Eigen::Index>(map.out_coords.size()) &&
              grad_out.cols() == layer.out_channels,
          ErrorCode::ShapeError, "grad_out shape does not match layer output");
  ConvBackwardResult res;
  res.grad_in = Eigen::MatrixXd::Zero(in_feats.rows(), layer.in_channels);
  res.grads.setZero(layer);
  for (std::size_t k = 0; k < map.entries.size(); ++k) {
    const auto& pairs = map.entries[k];
    if (pairs.empty()) continue;
    const Eigen::MatrixXd& w = layer.weights[k];
    Eigen::MatrixXd& gw = res.grads.weights[k];
    for (auto [in_row, out_row] : pairs) {
      res.grad_in.row(in_row).noalias() += grad_out.row(out_row) * w.transpose();
      gw.noalias() += in_feats.row(in_row).transpose() * grad_out.row(out_row);
    }
  }
  if (layer.bias) *res.grads.bias = grad_out.colwise().sum().transpose();
  return res;
}

/// Convenience: build the map, run the convolution, and assemble the output
/// tensor at the right level stride.
inline std::pair<SparseTensor, KernelMap> conv_apply(const SparseTensor& input, const ConvLayer& layer,
                                                     const std::vector<Coord>* target_coords = nullptr) {
  if (layer.transposed)
    require(input.stride % layer.stride == 0, ErrorCode::ShapeError,
            "transposed stride does not divide the tensor stride");
  KernelMap map = build_kernel_map(input.coords, layer.kernel_size, layer.stride, layer.transposed,
                                   target_coords);
  SparseTensor out;
  out.coords = map.out_coords;
  out.feats = conv_forward(input.feats, layer, map);
  out.stride = layer.transposed ? input.stride / layer.stride : input.stride * layer.stride;
  return {std::move(out), std::move(map)};
}

}  // namespace sparse
}  // namespace canonreg
