#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canonreg/geom.hpp"

namespace canonreg {

using Json = nlohmann::json;

// Doubles are written with 17 significant digits so artifacts round-trip
// bit-exactly and reruns are byte-identical.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot open for write: " + path.string());
  out << contents;
  require(out.good(), ErrorCode::IoError, "write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open for read: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// ASCII PLY: element vertex, properties x,y,z as float64.
// ---------------------------------------------------------------------------

inline std::string ply_to_string(const PointCloud& cloud, const std::vector<std::string>& comments = {}) {
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\n";
  for (const auto& c : comments) out << "comment " << c << "\n";
  out << "element vertex " << cloud.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\nend_header\n";
  for (const auto& p : cloud.points)
    out << format_double(p.x()) << ' ' << format_double(p.y()) << ' ' << format_double(p.z()) << '\n';
  return out.str();
}

inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
                      const std::vector<std::string>& comments = {}) {
  write_text_file(path, ply_to_string(cloud, comments));
}

inline PointCloud ply_from_string(const std::string& text, const std::string& origin = "<string>") {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&](std::string& out) {
    if (!std::getline(in, out)) fail(ErrorCode::IoError, "truncated PLY header in " + origin);
    if (!out.empty() && out.back() == '\r') out.pop_back();
  };
  next_line(line);
  require(line == "ply", ErrorCode::IoError, "not a PLY file: " + origin);
  next_line(line);
  require(line == "format ascii 1.0", ErrorCode::IoError, "unsupported PLY format in " + origin);
  std::size_t count = 0;
  std::vector<std::string> properties;
  bool in_vertex = false;
  for (;;) {
    next_line(line);
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok == "obj_info") continue;
    if (tok == "element") {
      std::string name;
      ls >> name >> count;
      in_vertex = (name == "vertex");
      require(in_vertex, ErrorCode::IoError, "unsupported PLY element '" + name + "' in " + origin);
    } else if (tok == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      require(type == "double" || type == "float" || type == "float64" || type == "float32",
              ErrorCode::IoError, "unsupported property type '" + type + "' in " + origin);
      properties.push_back(name);
    }
  }
  require(properties.size() >= 3 && properties[0] == "x" && properties[1] == "y" && properties[2] == "z",
          ErrorCode::IoError, "PLY vertex must expose x,y,z in " + origin);
  PointCloud cloud;
  cloud.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    next_line(line);
    std::istringstream ls(line);
    Vec3 p;
    ls >> p.x() >> p.y() >> p.z();
    require(!ls.fail(), ErrorCode::IoError, "malformed PLY vertex row in " + origin);
    cloud.points.push_back(p);
  }
  require(cloud.all_finite(), ErrorCode::IoError, "non-finite coordinates in " + origin);
  return cloud;
}

inline PointCloud read_ply(const std::filesystem::path& path) {
  return ply_from_string(read_text_file(path), path.string());
}

// ---------------------------------------------------------------------------
// JSON forms: RigidTransform is {"rotation": 9 row-major numbers,
// "translation": 3 numbers}; pose annotations add {"scale": s}.
// ---------------------------------------------------------------------------

inline Json transform_to_json(const RigidTransform& t) {
  Json j;
  std::vector<double> r(9);
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) r[row * 3 + col] = t.rotation(row, col);
  j["rotation"] = r;
  j["translation"] = std::vector<double>{t.translation.x(), t.translation.y(), t.translation.z()};
  return j;
}

inline RigidTransform transform_from_json(const Json& j) {
  require(j.contains("rotation") && j.contains("translation"), ErrorCode::IoError,
          "transform JSON needs rotation and translation");
  auto r = j.at("rotation").get<std::vector<double>>();
  auto p = j.at("translation").get<std::vector<double>>();
  require(r.size() == 9 && p.size() == 3, ErrorCode::IoError, "transform JSON has wrong lengths");
  RigidTransform t;
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) t.rotation(row, col) = r[row * 3 + col];
  t.translation = Vec3(p[0], p[1], p[2]);
  return t;
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline Json read_json(const std::filesystem::path& path) {
  Json j = Json::parse(read_text_file(path), nullptr, false);
  require(!j.is_discarded(), ErrorCode::IoError, "malformed JSON: " + path.string());
  return j;
}

}  // namespace canonreg
