#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "canonreg/dataset.hpp"
#include "canonreg/hull.hpp"
#include "canonreg/synthgen.hpp"

using namespace canonreg;
namespace fs = std::filesystem;

namespace {

ShapeParams fixed_params() {
  ShapeParams p;
  p.seat_width = 0.5;
  p.seat_depth = 0.44;
  p.seat_height = 0.46;
  p.seat_thickness = 0.05;
  p.back_height = 0.5;
  p.back_tilt = 0.15;
  p.leg_thickness = 0.05;
  p.leg_count = 4;
  p.leg_style = LegStyle::Box;
  p.armrest = false;
  p.global_scale = 1.0;
  p.seed = 77;
  return p;
}

// Depth-buffer visibility oracle: angular bins around the camera, nearest
// point per bin wins.
std::set<std::size_t> depth_buffer_visible(const PointCloud& model, const Vec3& camera,
                                           double angular_resolution) {
  std::map<std::pair<long, long>, std::pair<double, std::size_t>> bins;
  for (std::size_t i = 0; i < model.size(); ++i) {
    Vec3 d = model[i] - camera;
    double r = d.norm();
    double theta = std::acos(std::clamp(d.z() / r, -1.0, 1.0));
    double phi = std::atan2(d.y(), d.x());
    auto key = std::make_pair(static_cast<long>(std::floor(theta / angular_resolution)),
                              static_cast<long>(std::floor(phi / angular_resolution)));
    auto it = bins.find(key);
    if (it == bins.end() || r < it->second.first) bins[key] = {r, i};
  }
  std::set<std::size_t> visible;
  for (const auto& [key, entry] : bins) visible.insert(entry.second);
  return visible;
}

}  // namespace

TEST_CASE("convex_hull_vertices", "[synthgen]") {
  SECTION("cube corners with interior points") {
    std::vector<Vec3> pts;
    for (int i = 0; i < 8; ++i) pts.push_back(Vec3(i & 1, (i >> 1) & 1, (i >> 2) & 1));
    Rng rng(1);
    for (int i = 0; i < 50; ++i)
      pts.push_back(Vec3(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)));
    auto verts = convex_hull_vertices(pts);
    REQUIRE(verts == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
  }

  SECTION("random sphere samples are all hull vertices") {
    Rng rng(2);
    std::vector<Vec3> pts;
    for (int i = 0; i < 100; ++i) {
      Vec3 v(rng.normal(), rng.normal(), rng.normal());
      pts.push_back(v.normalized());
    }
    auto verts = convex_hull_vertices(pts);
    REQUIRE(verts.size() == pts.size());
  }

  SECTION("collinear input keeps only the extremes") {
    std::vector<Vec3> pts = {Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2), Vec3(0.5, 0.5, 0.5)};
    auto verts = convex_hull_vertices(pts);
    REQUIRE(verts == std::vector<std::size_t>{0, 2});
  }

  SECTION("coplanar input falls back to a 2D hull") {
    std::vector<Vec3> pts = {Vec3(0, 0, 1), Vec3(1, 0, 1), Vec3(0, 1, 1), Vec3(1, 1, 1),
                             Vec3(0.5, 0.5, 1)};
    auto verts = convex_hull_vertices(pts);
    REQUIRE(verts == std::vector<std::size_t>{0, 1, 2, 3});
  }
}

TEST_CASE("generate_model", "[synthgen]") {
  SECTION("deterministic given the seed") {
    PointCloud a = generate_model(fixed_params(), 500);
    PointCloud b = generate_model(fixed_params(), 500);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE((a[i] - b[i]).norm() == 0.0);
  }

  SECTION("armrest flag controls the armrest region") {
    ShapeParams p = fixed_params();
    double seat_top = p.seat_height + p.seat_thickness;
    auto in_armrest_region = [&](const Vec3& q) {
      return std::abs(q.x()) > p.seat_width / 2 - 1e-9 && q.z() > seat_top + 0.02 &&
             q.y() > -p.seat_depth / 2 + 1e-6;
    };

    PointCloud without = generate_model(p, 4000);
    for (const auto& q : without.points) REQUIRE(!in_armrest_region(q));

    p.armrest = true;
    PointCloud with = generate_model(p, 4000);
    std::size_t hits = 0;
    for (const auto& q : with.points)
      if (in_armrest_region(q)) ++hits;
    REQUIRE(hits > 0);
  }

  SECTION("bounding box agrees with hand-computed part extents") {
    ShapeParams p = fixed_params();
    PointCloud cloud = generate_model(p, 20000);
    Aabb box = bounding_box(cloud);

    // Hand-computed: widest parts are the seat (x, y front) and tilted back
    // (y rear, z top); the floor is z = 0.
    double seat_top = p.seat_height + p.seat_thickness;
    double expect_x = p.seat_width / 2;
    double expect_y_front = p.seat_depth / 2;
    // back rotates about (y=-d/2, z=seat_top) by the tilt angle toward -y:
    // deepest corner is the outer-bottom edge, highest is the top edge
    double s = std::sin(p.back_tilt), c = std::cos(p.back_tilt);
    double y0 = -p.seat_depth / 2;
    auto back_y = [&](double dy, double dz) { return y0 + c * dy - s * dz; };
    auto back_z = [&](double dy, double dz) { return seat_top + s * dy + c * dz; };
    double expect_y_rear = std::min({back_y(-p.leg_thickness, 0.0), back_y(-p.leg_thickness, p.back_height)});
    double expect_z_top = std::max({back_z(0.0, p.back_height), back_z(-p.leg_thickness, p.back_height)});

    REQUIRE(box.min.z() == Catch::Approx(0.0).margin(0.01));
    REQUIRE(box.max.z() == Catch::Approx(expect_z_top).margin(0.01));
    REQUIRE(box.min.x() == Catch::Approx(-expect_x).margin(0.01));
    REQUIRE(box.max.x() == Catch::Approx(expect_x).margin(0.01));
    REQUIRE(box.max.y() == Catch::Approx(expect_y_front).margin(0.01));
    REQUIRE(box.min.y() == Catch::Approx(expect_y_rear).margin(0.01));

    // strict containment in the analytic union of part boxes
    Aabb analytic = analytic_extents(p);
    for (const auto& q : cloud.points) REQUIRE(analytic.contains(q, 1e-9));
  }

  SECTION("global scale multiplies the extents") {
    ShapeParams p = fixed_params();
    PointCloud base = generate_model(p, 1000);
    p.global_scale = 2.0;
    PointCloud scaled = generate_model(p, 1000);
    REQUIRE(bounding_box(scaled).diagonal() ==
            Catch::Approx(2.0 * bounding_box(base).diagonal()).margin(1e-9));
  }

  SECTION("invalid dimensions fail") {
    ShapeParams p = fixed_params();
    p.seat_width = -1.0;
    REQUIRE_THROWS_MATCHES(generate_model(p, 500), Error, Catch::Matchers::Predicate<Error>(
        [](const Error& e) { return e.code() == ErrorCode::BadParameter; }));
    REQUIRE_THROWS_AS(generate_model(fixed_params(), 50), Error);
  }
}

TEST_CASE("render_partial", "[synthgen]") {
  SECTION("a single point is always visible") {
    PointCloud one{{Vec3(0, 0, 0)}};
    ViewSpec view;
    view.camera = Vec3(0, -2, 0);
    PartialView out = render_partial(one, view);
    REQUIRE(out.cloud.size() == 1);
    REQUIRE(out.source_indices == std::vector<std::size_t>{0});
  }

  SECTION("of two points collinear with the camera only the nearer survives") {
    PointCloud two{{Vec3(0, 1, 0), Vec3(0, 2, 0)}};
    ViewSpec view;
    view.camera = Vec3(0, -1, 0);
    PartialView out = render_partial(two, view);
    REQUIRE(out.cloud.size() == 1);
    REQUIRE(out.source_indices == std::vector<std::size_t>{0});
  }

  SECTION("camera inside the bounding sphere fails") {
    Rng rng(3);
    PointCloud cloud;
    for (int i = 0; i < 100; ++i)
      cloud.points.push_back(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
    ViewSpec view;
    view.camera = Vec3(0.1, 0.1, 0.1);
    REQUIRE_THROWS_MATCHES(render_partial(cloud, view), Error, Catch::Matchers::Predicate<Error>(
        [](const Error& e) { return e.code() == ErrorCode::BadParameter; }));
  }

  SECTION("frontal chair view drops seat-bottom points") {
    ShapeParams p = fixed_params();
    PointCloud chair = generate_model(p, 6000);
    Aabb box = bounding_box(chair);
    double r_sphere = 0.0;
    for (const auto& q : chair.points) r_sphere = std::max(r_sphere, (q - box.center()).norm());

    ViewSpec view;  // in front of the chair (+y), above seat level
    view.camera = box.center() + 2.0 * r_sphere * Vec3(0, 1, 0.6).normalized();
    PartialView out = render_partial(chair, view);

    // subset with preserved indices
    REQUIRE(out.cloud.size() < chair.size());
    REQUIRE(!out.cloud.empty());
    for (std::size_t k = 0; k < out.source_indices.size(); ++k)
      REQUIRE((out.cloud[k] - chair[out.source_indices[k]]).norm() == 0.0);

    // seat underside (z just below the seat plate, interior x/y) is back-facing
    std::size_t bottom_total = 0, bottom_visible = 0;
    std::set<std::size_t> visible(out.source_indices.begin(), out.source_indices.end());
    for (std::size_t i = 0; i < chair.size(); ++i) {
      const Vec3& q = chair[i];
      bool on_bottom = std::abs(q.z() - p.seat_height) < 1e-9 &&
                       std::abs(q.x()) < p.seat_width / 2 - 0.08 &&
                       q.y() > -p.seat_depth / 2 + 0.08 && q.y() < p.seat_depth / 2 - 0.08;
      if (!on_bottom) continue;
      ++bottom_total;
      if (visible.count(i)) ++bottom_visible;
    }
    REQUIRE(bottom_total > 20);
    REQUIRE(double(bottom_visible) <= 0.2 * double(bottom_total));

    // depth-buffer oracle: hidden-point removal should agree with the
    // nearest-per-angular-bin picture on a clear majority of its picks
    auto oracle = depth_buffer_visible(chair, view.camera, 0.02);
    std::size_t agree = 0;
    for (std::size_t i : oracle)
      if (visible.count(i)) ++agree;
    REQUIRE(double(agree) >= 0.6 * double(oracle.size()));
  }
}

TEST_CASE("make_dataset", "[synthgen]") {
  fs::path root = fs::temp_directory_path() / "canonreg_test_dataset";
  fs::remove_all(root);

  DatasetParams params;
  params.n_models = 4;
  params.n_views = 2;
  params.n_points = 400;
  params.train_fraction = 0.75;
  params.seed = 42;

  SECTION("counting: models, views, annotations, manifest") {
    DatasetIndex index = make_dataset(root / "a", params);
    REQUIRE(index.model_ids.size() == 4);
    REQUIRE(index.train_ids.size() == 3);
    REQUIRE(index.test_ids.size() == 1);
    std::size_t models = 0, views = 0, annotations = 0;
    for (const auto& e : fs::directory_iterator(root / "a" / "models")) ++models, (void)e;
    for (const auto& e : fs::directory_iterator(root / "a" / "views")) ++views, (void)e;
    for (const auto& e : fs::directory_iterator(root / "a" / "annotations")) ++annotations, (void)e;
    REQUIRE(models == 4);
    REQUIRE(views == 8);
    REQUIRE(annotations == 8);
    REQUIRE(fs::exists(root / "a" / "manifest.json"));
  }

  SECTION("same seed twice gives a byte-identical tree") {
    make_dataset(root / "b1", params);
    make_dataset(root / "b2", params);
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(root / "b1"))
      if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), root / "b1"));
    REQUIRE(rel.size() == 4 + 8 + 8 + 1);
    for (const auto& r : rel)
      REQUIRE(read_text_file(root / "b1" / r) == read_text_file(root / "b2" / r));
  }

  SECTION("annotations round-trip into the canonical unit box") {
    make_dataset(root / "c", params);
    LoadedDataset ds = load_dataset(root / "c");
    REQUIRE(ds.views.size() == 8);
    for (const auto& view : ds.views) {
      PointCloud ncc = to_ncc(view.posed);
      for (const auto& q : ncc.points) REQUIRE(q.norm() <= 0.5 + 1e-9);
    }
    // complete models normalize to a centered unit-diagonal box
    for (const auto& [id, model] : ds.models) {
      Aabb box = bounding_box(to_ncc(model.canonical));
      REQUIRE(box.diagonal() == Catch::Approx(1.0).margin(1e-9));
      REQUIRE(box.center().norm() < 1e-9);
    }
  }
}
