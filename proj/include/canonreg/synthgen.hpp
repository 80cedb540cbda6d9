#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "canonreg/hull.hpp"
#include "canonreg/io.hpp"
#include "canonreg/ncc.hpp"

namespace canonreg {

enum class LegStyle { Box, Cylinder };

/// Parametric chair in canonical pose: seat up (+z), back toward -y,
/// centered on the z axis, feet on z = 0. Dimensions in meters before
/// global_scale is applied.
struct ShapeParams {
  double seat_width = 0.45;
  double seat_depth = 0.42;
  double seat_height = 0.45;
  double seat_thickness = 0.05;
  double back_height = 0.45;
  double back_tilt = 0.10;  // radians, leaning toward -y
  double leg_thickness = 0.045;
  int leg_count = 4;
  LegStyle leg_style = LegStyle::Box;
  bool armrest = false;
  double global_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(seat_width > 0 && seat_depth > 0 && seat_height > 0 && seat_thickness > 0 &&
                back_height > 0 && leg_thickness > 0 && global_scale > 0,
            ErrorCode::BadParameter, "chair dimensions must be positive");
    require(leg_count == 3 || leg_count == 4, ErrorCode::BadParameter, "leg count must be 3 or 4");
    require(back_tilt >= 0.0 && back_tilt < 0.6, ErrorCode::BadParameter, "back tilt out of range");
  }
};

inline ShapeParams random_shape_params(Rng& rng) {
  ShapeParams p;
  p.seat_width = rng.uniform(0.38, 0.55);
  p.seat_depth = rng.uniform(0.36, 0.50);
  p.seat_height = rng.uniform(0.38, 0.52);
  p.seat_thickness = rng.uniform(0.035, 0.07);
  p.back_height = rng.uniform(0.30, 0.55);
  p.back_tilt = rng.uniform(0.0, 0.25);
  p.leg_thickness = rng.uniform(0.03, 0.06);
  p.leg_count = rng.unit() < 0.85 ? 4 : 3;
  p.leg_style = rng.unit() < 0.5 ? LegStyle::Box : LegStyle::Cylinder;
  p.armrest = rng.unit() < 0.4;
  p.global_scale = rng.uniform(0.85, 1.2);
  return p;
}

namespace synth_detail {

struct Rect {  // origin + two edge vectors
  Vec3 origin, e1, e2;
  double area() const { return e1.cross(e2).norm(); }
};

struct Cylinder {  // lateral surface only
  Vec3 base;  // center of bottom circle
  double radius, height;
  double area() const { return 6.28318530717958647692 * radius * height; }
};

struct Primitive {
  bool is_rect = true;
  Rect rect;
  Cylinder cyl;
  double area = 0.0;
};

inline void add_box(std::vector<Primitive>& prims, const Vec3& lo, const Vec3& hi,
                    const Mat3& rot = Mat3::Identity(), const Vec3& pivot = Vec3::Zero()) {
  Vec3 d = hi - lo;
  auto face = [&](const Vec3& origin, const Vec3& e1, const Vec3& e2) {
    Primitive p;
    p.rect = {rot * (origin - pivot) + pivot, rot * e1, rot * e2};
    p.area = p.rect.area();
    prims.push_back(p);
  };
  Vec3 ex(d.x(), 0, 0), ey(0, d.y(), 0), ez(0, 0, d.z());
  face(lo, ex, ey);                        // bottom
  face(lo + ez, ex, ey);                   // top
  face(lo, ex, ez);                        // front (-y)
  face(lo + ey, ex, ez);                   // rear (+y)
  face(lo, ey, ez);                        // left (-x)
  face(lo + ex, ey, ez);                   // right (+x)
}

inline void add_cylinder(std::vector<Primitive>& prims, const Vec3& base, double radius, double height) {
  Primitive p;
  p.is_rect = false;
  p.cyl = {base, radius, height};
  p.area = p.cyl.area();
  prims.push_back(p);
}

inline Mat3 rotation_about_x(double angle) {
  Mat3 r;
  r << 1, 0, 0, 0, std::cos(angle), -std::sin(angle), 0, std::sin(angle), std::cos(angle);
  return r;
}

inline std::vector<Primitive> chair_primitives(const ShapeParams& p) {
  std::vector<Primitive> prims;
  const double w = p.seat_width, d = p.seat_depth, h = p.seat_height;
  const double ts = p.seat_thickness, t = p.leg_thickness;
  const double seat_top = h + ts;

  add_box(prims, {-w / 2, -d / 2, h}, {w / 2, d / 2, seat_top});

  // Back leans toward -y about its joint with the seat.
  Vec3 pivot(0.0, -d / 2, seat_top);
  Mat3 tilt = rotation_about_x(p.back_tilt);
  add_box(prims, {-w / 2, -d / 2 - t, seat_top}, {w / 2, -d / 2, seat_top + p.back_height}, tilt, pivot);

  std::vector<Vec3> leg_centers;
  double inset = t / 2;
  double lx = w / 2 - inset, ly = d / 2 - inset;
  if (p.leg_count == 4) {
    leg_centers = {{lx, ly, 0}, {-lx, ly, 0}, {lx, -ly, 0}, {-lx, -ly, 0}};
  } else {
    leg_centers = {{lx, ly, 0}, {-lx, ly, 0}, {0, -ly, 0}};
  }
  for (const auto& c : leg_centers) {
    if (p.leg_style == LegStyle::Box)
      add_box(prims, {c.x() - t / 2, c.y() - t / 2, 0.0}, {c.x() + t / 2, c.y() + t / 2, h});
    else
      add_cylinder(prims, c, t / 2, h);
  }

  if (p.armrest) {
    double arm_h = 0.4 * p.back_height;
    for (double side : {-1.0, 1.0}) {
      double x0 = side * (w / 2), x1 = side * (w / 2 + t);
      add_box(prims, {std::min(x0, x1), -d / 2, seat_top}, {std::max(x0, x1), d * 0.25, seat_top + arm_h});
    }
  }
  return prims;
}

inline Vec3 sample_primitive(const Primitive& prim, Rng& rng) {
  if (prim.is_rect) {
    return prim.rect.origin + rng.unit() * prim.rect.e1 + rng.unit() * prim.rect.e2;
  }
  const double two_pi = 6.28318530717958647692;
  double theta = rng.uniform(0.0, two_pi);
  double z = rng.uniform(0.0, prim.cyl.height);
  return prim.cyl.base + Vec3(prim.cyl.radius * std::cos(theta), prim.cyl.radius * std::sin(theta), z);
}

}  // namespace synth_detail

/// Uniform area-weighted sample of the union of the chair part surfaces,
/// in canonical pose. Deterministic given params.seed.
inline PointCloud generate_model(const ShapeParams& params, std::size_t n_points) {
  params.validate();
  require(n_points >= 100, ErrorCode::BadParameter, "need at least 100 points per model");
  auto prims = synth_detail::chair_primitives(params);
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& p : prims) {
    total += p.area;
    cumulative.push_back(total);
  }
  Rng rng = Rng::substream(params.seed, "model-sample");
  PointCloud cloud;
  cloud.points.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    double r = rng.uniform(0.0, total);
    std::size_t pick = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
    if (pick >= prims.size()) pick = prims.size() - 1;
    cloud.points.push_back(params.global_scale * synth_detail::sample_primitive(prims[pick], rng));
  }
  return cloud;
}

/// Analytic union of the part bounding boxes; generated samples always lie
/// inside this (cylinders are bounded by their enclosing boxes).
inline Aabb analytic_extents(const ShapeParams& p) {
  auto prims = synth_detail::chair_primitives(p);
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  auto grow = [&](const Vec3& v) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  };
  for (const auto& prim : prims) {
    if (prim.is_rect) {
      grow(prim.rect.origin);
      grow(prim.rect.origin + prim.rect.e1);
      grow(prim.rect.origin + prim.rect.e2);
      grow(prim.rect.origin + prim.rect.e1 + prim.rect.e2);
    } else {
      Vec3 r(prim.cyl.radius, prim.cyl.radius, 0.0);
      grow(prim.cyl.base - r);
      grow(prim.cyl.base + r + Vec3(0, 0, prim.cyl.height));
    }
  }
  return {p.global_scale * lo, p.global_scale * hi};
}

struct ViewSpec {
  Vec3 camera = Vec3(0, -2, 1);
  Vec3 look_at = Vec3::Zero();
  double angular_resolution = 0.01;  // radians; consumed by depth-buffer oracles
  double hpr_radius_factor = 100.0;  // spherical-inversion radius multiplier
};

struct PartialView {
  PointCloud cloud;
  std::vector<std::size_t> source_indices;  // into the model cloud
};

/// Visibility by hidden-point removal: spherical inversion about the camera,
/// then the points on the convex hull of the inverted set plus the camera.
/// Output is a subset of the model points with indices preserved.
inline PartialView render_partial(const PointCloud& model, const ViewSpec& view) {
  require(!model.empty(), ErrorCode::BadParameter, "render_partial on an empty model");
  Aabb box = bounding_box(model);
  Vec3 center = box.center();
  double bounding_radius = 0.0;
  for (const auto& p : model.points) bounding_radius = std::max(bounding_radius, (p - center).norm());
  require((view.camera - center).norm() > bounding_radius, ErrorCode::BadParameter,
          "camera must be outside the model's bounding sphere");

  double max_dist = 0.0;
  for (const auto& p : model.points) max_dist = std::max(max_dist, (p - view.camera).norm());
  double inversion_radius = view.hpr_radius_factor * max_dist;

  std::vector<Vec3> inverted(model.size() + 1);
  for (std::size_t i = 0; i < model.size(); ++i) {
    Vec3 d = model.points[i] - view.camera;
    double len = d.norm();
    inverted[i] = view.camera + d + 2.0 * (inversion_radius - len) * (d / len);
  }
  inverted[model.size()] = view.camera;

  PartialView out;
  for (std::size_t idx : convex_hull_vertices(inverted)) {
    if (idx == model.size()) continue;  // the camera itself
    out.source_indices.push_back(idx);
    out.cloud.points.push_back(model.points[idx]);
  }
  return out;
}

/// The 10 highest vertices of a regular icosahedron, unit-normalized; the
/// two bottom-most vertices are dropped.
inline std::vector<Vec3> icosahedron_view_directions() {
  const double phi = 1.61803398874989484820;
  std::vector<Vec3> all = {
      {0, 1, phi},  {0, -1, phi},  {phi, 0, 1},  {-phi, 0, 1},  {1, phi, 0},  {-1, phi, 0},
      {1, -phi, 0}, {-1, -phi, 0}, {phi, 0, -1}, {-phi, 0, -1},
  };
  for (auto& v : all) v.normalize();
  return all;
}

struct DatasetParams {
  std::size_t n_models = 32;
  std::size_t n_views = 10;
  double train_fraction = 0.75;
  std::size_t n_points = 4096;
  double jitter_sigma = 0.0;       // meters; optional Gaussian noise on views
  double placement_range = 1.0;    // meters; random SE(3) translation box
  std::uint64_t seed = 0;
};

struct DatasetIndex {
  std::filesystem::path root;
  DatasetParams params;
  std::vector<std::string> model_ids;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

inline std::string model_name(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "m%03zu", index);
  return buf;
}

inline std::string view_name(const std::string& model_id, std::size_t view) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%02zu", view);
  return model_id + "_" + buf;
}

/// Writes models (PLY), partial views with ground-truth pose/scale
/// annotations under random SE(3) placements, and the split manifest.
/// Fixed seed -> byte-identical tree.
inline DatasetIndex make_dataset(const std::filesystem::path& root, const DatasetParams& params) {
  require(params.n_models >= 4, ErrorCode::BadParameter, "need at least 4 models");
  require(params.n_views >= 1, ErrorCode::BadParameter, "need at least 1 view");
  require(params.train_fraction > 0.0 && params.train_fraction <= 1.0, ErrorCode::BadParameter,
          "train fraction must be in (0, 1]");

  std::filesystem::create_directories(root / "models");
  std::filesystem::create_directories(root / "views");
  std::filesystem::create_directories(root / "annotations");

  DatasetIndex index;
  index.root = root;
  index.params = params;

  auto dirs = icosahedron_view_directions();
  std::string seed_comment = "seed " + std::to_string(params.seed);

  for (std::size_t m = 0; m < params.n_models; ++m) {
    std::string id = model_name(m);
    index.model_ids.push_back(id);
    Rng prng = Rng::substream(params.seed, "params/" + id);
    ShapeParams sp = random_shape_params(prng);
    sp.seed = Rng::substream(params.seed, "shape/" + id).u64();
    PointCloud model = generate_model(sp, params.n_points);
    write_ply(root / "models" / (id + ".ply"), model, {seed_comment, "model " + id});

    PosedCloud canonical = canonical_posed(model);
    for (std::size_t v = 0; v < params.n_views; ++v) {
      ViewSpec view;
      Vec3 dir = dirs[v % dirs.size()];
      Aabb box = bounding_box(model);
      double r_sphere = 0.0;
      for (const auto& p : model.points) r_sphere = std::max(r_sphere, (p - box.center()).norm());
      double distance = 2.0 * r_sphere * (1.0 + 0.1 * double(v / dirs.size()));
      view.camera = box.center() + distance * dir;
      PartialView partial = render_partial(model, view);

      Rng place_rng = Rng::substream(params.seed, "place/" + view_name(id, v));
      RigidTransform placement = random_transform(place_rng, params.placement_range);
      PointCloud world = apply_transform(placement, partial.cloud);
      if (params.jitter_sigma > 0.0) {
        Rng jitter = Rng::substream(params.seed, "jitter/" + view_name(id, v));
        for (auto& p : world.points)
          p += params.jitter_sigma * Vec3(jitter.normal(), jitter.normal(), jitter.normal());
      }

      std::string vn = view_name(id, v);
      write_ply(root / "views" / (vn + ".ply"), world, {seed_comment, "view " + vn});

      // Annotation: the transform JSON fields plus scale, flat, with metadata.
      RigidTransform pose = compose(placement, canonical.pose);
      Json ann = transform_to_json(pose);
      ann["scale"] = canonical.scale;
      ann["model_id"] = id;
      ann["view_index"] = v;
      ann["camera"] = std::vector<double>{view.camera.x(), view.camera.y(), view.camera.z()};
      ann["source_indices"] = partial.source_indices;
      ann["seed"] = params.seed;
      write_json(root / "annotations" / (vn + ".json"), ann);
    }
  }

  std::size_t n_train = static_cast<std::size_t>(std::lround(params.train_fraction * double(params.n_models)));
  n_train = std::clamp<std::size_t>(n_train, 1, params.n_models);
  for (std::size_t m = 0; m < params.n_models; ++m)
    (m < n_train ? index.train_ids : index.test_ids).push_back(index.model_ids[m]);

  Json manifest;
  manifest["format"] = 1;
  manifest["seed"] = params.seed;
  manifest["n_models"] = params.n_models;
  manifest["n_views"] = params.n_views;
  manifest["n_points"] = params.n_points;
  manifest["train_fraction"] = params.train_fraction;
  manifest["jitter_sigma"] = params.jitter_sigma;
  manifest["placement_range"] = params.placement_range;
  manifest["train"] = index.train_ids;
  manifest["test"] = index.test_ids;
  write_json(root / "manifest.json", manifest);
  return index;
}

}  // namespace canonreg
