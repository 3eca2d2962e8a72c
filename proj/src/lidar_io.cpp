#include "griddet/lidar_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"
#include "griddet/json_util.hpp"

namespace griddet {

namespace {

float read_f32_le(const uint8_t* p) {
  uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
               (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

void write_f32_le(float v, uint8_t* p) {
  const auto u = std::bit_cast<uint32_t>(v);
  p[0] = static_cast<uint8_t>(u);
  p[1] = static_cast<uint8_t>(u >> 8);
  p[2] = static_cast<uint8_t>(u >> 16);
  p[3] = static_cast<uint8_t>(u >> 24);
}

void validate_point(const Point& p, size_t index) {
  const std::string where = "record " + std::to_string(index);
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
      !std::isfinite(p.intensity) || !std::isfinite(p.dt)) {
    throw ValidationError(where + ": non-finite value");
  }
  if (p.dt > 0.f) throw ValidationError(where + ": dt must be <= 0");
  if (p.intensity < 0.f || p.intensity > 1.f) {
    throw ValidationError(where + ": intensity outside [0, 1] (pre-scale raw intensities)");
  }
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json pose_to_json(const Pose& p) {
  return {{"rotation", p.rotation},
          {"translation", {p.translation.x, p.translation.y, p.translation.z}}};
}

Pose pose_from_json(const nlohmann::json& j) {
  json_util::check_keys(j, {"rotation", "translation"}, "pose");
  Pose p;
  const auto r = json_util::get<std::vector<double>>(j, "rotation", "pose");
  const auto t = json_util::get<std::vector<double>>(j, "translation", "pose");
  if (r.size() != 9 || t.size() != 3) throw FormatError("pose: expected 9 rotation and 3 translation values");
  std::copy(r.begin(), r.end(), p.rotation.begin());
  p.translation = {t[0], t[1], t[2]};
  p.validate();
  return p;
}

}  // namespace

Pose Pose::from_yaw(double yaw, Vec3 t) {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  Pose p;
  p.rotation = {c, -s, 0, s, c, 0, 0, 0, 1};
  p.translation = t;
  return p;
}

Vec3 Pose::apply(const Vec3& p) const {
  const auto& r = rotation;
  return {r[0] * p.x + r[1] * p.y + r[2] * p.z + translation.x,
          r[3] * p.x + r[4] * p.y + r[5] * p.z + translation.y,
          r[6] * p.x + r[7] * p.y + r[8] * p.z + translation.z};
}

Pose Pose::inverse() const {
  Pose inv;
  const auto& r = rotation;
  inv.rotation = {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
  const Vec3 t = translation;
  const auto& q = inv.rotation;
  inv.translation = {-(q[0] * t.x + q[1] * t.y + q[2] * t.z),
                     -(q[3] * t.x + q[4] * t.y + q[5] * t.z),
                     -(q[6] * t.x + q[7] * t.y + q[8] * t.z)};
  return inv;
}

Pose Pose::compose(const Pose& other) const {
  Pose out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += rotation[i * 3 + k] * other.rotation[k * 3 + j];
      out.rotation[i * 3 + j] = acc;
    }
  }
  const Vec3 t = apply(other.translation);
  out.translation = t;
  return out;
}

void Pose::validate() const {
  constexpr double kTol = 1e-6;
  const auto& r = rotation;
  for (double v : r) {
    if (!std::isfinite(v)) throw ValidationError("pose rotation is not finite");
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[i * 3 + k] * r[j * 3 + k];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > kTol) {
        throw ValidationError("pose rotation is not orthonormal");
      }
    }
  }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (std::abs(det - 1.0) > kTol) throw ValidationError("pose rotation determinant is not +1");
  if (!std::isfinite(translation.x) || !std::isfinite(translation.y) ||
      !std::isfinite(translation.z)) {
    throw ValidationError("pose translation is not finite");
  }
}

void PointCloud::validate() const {
  if (num_source_frames < 1) throw ValidationError("num_source_frames must be >= 1");
  bool has_current = false;
  for (size_t i = 0; i < points.size(); ++i) {
    validate_point(points[i], i);
    has_current = has_current || points[i].dt == 0.f;
  }
  if (num_source_frames == 1 && !points.empty() && !has_current) {
    throw ValidationError("single-sweep cloud has no point with dt = 0");
  }
}

const char* class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::kVehicle: return "vehicle";
    case ObjectClass::kPedestrian: return "pedestrian";
    case ObjectClass::kCyclist: return "cyclist";
  }
  return "?";
}

ObjectClass parse_class(const std::string& name) {
  if (name == "vehicle") return ObjectClass::kVehicle;
  if (name == "pedestrian") return ObjectClass::kPedestrian;
  if (name == "cyclist") return ObjectClass::kCyclist;
  throw ValidationError("unknown class '" + name + "'");
}

PointCloud decode_points(std::span<const uint8_t> bytes, const PointSchema& schema,
                         std::string frame_id) {
  const size_t rec = schema.record_bytes();
  if (rec == 0) throw ConfigError("point schema has no columns");
  if (bytes.size() % rec != 0) {
    throw FormatError("truncated point file: partial record at byte offset " +
                      std::to_string(bytes.size() / rec * rec) + " (record size " +
                      std::to_string(rec) + ")");
  }
  PointCloud cloud;
  cloud.frame_id = std::move(frame_id);
  const size_t n = bytes.size() / rec;
  cloud.points.resize(n);
  auto col = [&](const uint8_t* r, int c) { return c < 0 ? 0.f : read_f32_le(r + 4 * c); };
  for (size_t i = 0; i < n; ++i) {
    const uint8_t* r = bytes.data() + i * rec;
    Point& p = cloud.points[i];
    p = {col(r, schema.x), col(r, schema.y), col(r, schema.z), col(r, schema.intensity),
         col(r, schema.dt)};
    validate_point(p, i);
  }
  return cloud;
}

std::vector<uint8_t> encode_points(const PointCloud& cloud, const PointSchema& schema) {
  const size_t rec = schema.record_bytes();
  std::vector<uint8_t> out(cloud.size() * rec, 0);
  for (size_t i = 0; i < cloud.size(); ++i) {
    uint8_t* r = out.data() + i * rec;
    const Point& p = cloud.points[i];
    const std::pair<int, float> cols[] = {
        {schema.x, p.x}, {schema.y, p.y}, {schema.z, p.z}, {schema.intensity, p.intensity},
        {schema.dt, p.dt}};
    for (const auto& [c, v] : cols) {
      if (c >= 0) write_f32_le(v, r + 4 * c);
    }
  }
  return out;
}

PointCloud load_point_file(const std::filesystem::path& path, const PointSchema& schema) {
  const auto bytes = read_file(path);
  try {
    return decode_points(bytes, schema, path.stem().string());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void save_point_file(const std::filesystem::path& path, const PointCloud& cloud,
                     const PointSchema& schema) {
  const auto bytes = encode_points(cloud, schema);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

PointCloud assemble_frames(const PointCloud& current, std::span<const PastSweep> past,
                           const Pose& current_pose, int max_frames, double frame_gap) {
  if (max_frames < 1) throw ConfigError("max_frames must be >= 1");
  current_pose.validate();
  PointCloud out = current;
  const Pose world_to_current = current_pose.inverse();
  const size_t keep = std::min(past.size(), static_cast<size_t>(max_frames - 1));
  for (size_t k = 0; k < keep; ++k) {
    past[k].pose.validate();
    const Pose to_current = world_to_current.compose(past[k].pose);
    const int lag = past[k].lag > 0 ? past[k].lag : static_cast<int>(k + 1);
    const auto shift = static_cast<float>(static_cast<double>(lag) * frame_gap);
    for (const Point& p : past[k].cloud.points) {
      const Vec3 q = to_current.apply({p.x, p.y, p.z});
      out.points.push_back({static_cast<float>(q.x), static_cast<float>(q.y),
                            static_cast<float>(q.z), p.intensity, p.dt - shift});
    }
  }
  out.num_source_frames = current.num_source_frames + static_cast<int>(keep);
  return out;
}

PointCloud crop_range(const PointCloud& cloud, const GridSpec& spec) {
  PointCloud out;
  out.frame_id = cloud.frame_id;
  out.num_source_frames = cloud.num_source_frames;
  for (const Point& p : cloud.points) {
    if (spec.contains(p.x, p.y, p.z)) out.points.push_back(p);
  }
  return out;
}

std::vector<BoxLabel> parse_labels_jsonl(const std::string& text) {
  std::vector<BoxLabel> labels;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "labels line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": " + e.what());
    }
    try {
      json_util::check_keys(j, {"frame_id", "center", "dims", "yaw", "class", "num_points", "velocity"},
                            where);
      BoxLabel l;
      l.frame_id = json_util::get<std::string>(j, "frame_id", where);
      const auto c = json_util::get<std::vector<double>>(j, "center", where);
      const auto d = json_util::get<std::vector<double>>(j, "dims", where);
      if (c.size() != 3 || d.size() != 3) throw ValidationError(where + ": center/dims need 3 values");
      l.box.center = {c[0], c[1], c[2]};
      l.box.l = d[0];
      l.box.w = d[1];
      l.box.h = d[2];
      l.box.yaw = json_util::get<double>(j, "yaw", where);
      l.cls = parse_class(json_util::get<std::string>(j, "class", where));
      l.num_points = json_util::get<int>(j, "num_points", where);
      if (l.num_points < 0) throw ValidationError(where + ": num_points must be >= 0");
      if (j.contains("velocity") && !j["velocity"].is_null()) {
        const auto v = json_util::get<std::vector<double>>(j, "velocity", where);
        if (v.size() != 2) throw ValidationError(where + ": velocity needs 2 values");
        l.box.velocity = Vec2{v[0], v[1]};
      }
      validate_box(l.box);
      labels.push_back(std::move(l));
    } catch (const ConfigError& e) {
      // Label files are data, not configuration.
      throw FormatError(e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return labels;
}

std::vector<BoxLabel> load_labels(const std::filesystem::path& path) {
  return parse_labels_jsonl(read_text(path));
}

std::string format_label_line(const BoxLabel& l) {
  nlohmann::json j;
  j["frame_id"] = l.frame_id;
  j["center"] = {l.box.center.x, l.box.center.y, l.box.center.z};
  j["dims"] = {l.box.l, l.box.w, l.box.h};
  j["yaw"] = l.box.yaw;
  j["class"] = class_name(l.cls);
  j["num_points"] = l.num_points;
  if (l.box.velocity) j["velocity"] = {l.box.velocity->x, l.box.velocity->y};
  return j.dump();
}

void save_labels(const std::filesystem::path& path, std::span<const BoxLabel> labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& l : labels) out << format_label_line(l) << '\n';
}

FrameManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const std::string where = "manifest";
  json_util::check_keys(j, {"schema_version", "sequence_id", "frame_gap", "frames"}, where);
  FrameManifest m;
  m.sequence_id = json_util::get_or<std::string>(j, "sequence_id", "", where);
  m.frame_gap = json_util::get_or<double>(j, "frame_gap", 0.1, where);
  if (!(m.frame_gap > 0)) throw ConfigError("manifest.frame_gap must be > 0");
  const auto base = path.parent_path();
  for (const auto& f : j.at("frames")) {
    json_util::check_keys(f, {"frame_id", "points", "labels", "timestamp", "pose"}, "manifest.frames");
    FrameEntry e;
    e.frame_id = json_util::get<std::string>(f, "frame_id", "manifest.frames");
    e.points = base / json_util::get<std::string>(f, "points", "manifest.frames");
    if (f.contains("labels")) e.labels = base / f.at("labels").get<std::string>();
    e.timestamp = json_util::get_or<double>(f, "timestamp", 0.0, "manifest.frames");
    e.pose = f.contains("pose") ? pose_from_json(f.at("pose")) : Pose::identity();
    m.frames.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const FrameManifest& m) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["sequence_id"] = m.sequence_id;
  j["frame_gap"] = m.frame_gap;
  j["frames"] = nlohmann::json::array();
  // Entry paths are resolved like load_manifest returns them; store them
  // relative to the manifest directory.
  const auto base = std::filesystem::absolute(path).parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    const auto r = std::filesystem::absolute(p).lexically_relative(base);
    if (r.empty()) throw ConfigError("manifest entry " + p.string() + " has no path relative to " + base.string());
    return r.generic_string();
  };
  for (const auto& f : m.frames) {
    nlohmann::json e;
    e["frame_id"] = f.frame_id;
    e["points"] = rel(f.points);
    if (f.labels) e["labels"] = rel(*f.labels);
    e["timestamp"] = f.timestamp;
    e["pose"] = pose_to_json(f.pose);
    j["frames"].push_back(std::move(e));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace griddet
