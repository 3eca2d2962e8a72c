#include "griddet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"
#include "griddet/json_util.hpp"
#include "griddet/rng.hpp"

namespace griddet {

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment.") + name + " must lie in [0, 1]");
  };
  prob(flip_prob, "flip_prob");
  prob(frame_drop_prob, "frame_drop_prob");
  if (!(rotation[0] <= rotation[1])) throw ConfigError("augment.rotation must be [lo, hi] with lo <= hi");
  if (!(scale[0] <= scale[1] && scale[0] > 0.0)) throw ConfigError("augment.scale must be [lo, hi] with 0 < lo <= hi");
  if (!(translation_std >= 0.0)) throw ConfigError("augment.translation_std must be >= 0");
  if (paste) {
    for (int n : paste->samples) {
      if (n < 0) throw ConfigError("augment.paste.samples must be >= 0");
    }
  }
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"flip_prob", c.flip_prob},
       {"rotation", c.rotation},
       {"scale", c.scale},
       {"translation_std", c.translation_std},
       {"frame_drop_prob", c.frame_drop_prob}};
  if (c.paste) {
    nlohmann::json s;
    for (int k = 0; k < kNumClasses; ++k) s[class_name(static_cast<ObjectClass>(k))] = c.paste->samples[static_cast<size_t>(k)];
    j["paste"] = {{"db", c.paste->db_path.string()}, {"samples", s}, {"fade_after_epoch", c.paste->fade_after_epoch}};
  }
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  const std::string where = "augment";
  json_util::check_keys(j, {"schema_version", "flip_prob", "rotation", "scale", "translation_std", "paste",
                            "frame_drop_prob"},
                        where);
  c = AugmentConfig{};
  c.flip_prob = json_util::get_or<double>(j, "flip_prob", c.flip_prob, where);
  c.rotation = json_util::get_or<std::array<double, 2>>(j, "rotation", c.rotation, where);
  c.scale = json_util::get_or<std::array<double, 2>>(j, "scale", c.scale, where);
  c.translation_std = json_util::get_or<double>(j, "translation_std", c.translation_std, where);
  c.frame_drop_prob = json_util::get_or<double>(j, "frame_drop_prob", c.frame_drop_prob, where);
  if (j.contains("paste") && !j.at("paste").is_null()) {
    const auto& p = j.at("paste");
    json_util::check_keys(p, {"db", "samples", "fade_after_epoch"}, where + ".paste");
    PasteConfig pc;
    pc.db_path = json_util::get<std::string>(p, "db", where + ".paste");
    pc.fade_after_epoch = json_util::get_or<int>(p, "fade_after_epoch", pc.fade_after_epoch, where + ".paste");
    if (p.contains("samples")) {
      const auto& s = p.at("samples");
      json_util::check_keys(s, {"vehicle", "pedestrian", "cyclist"}, where + ".paste.samples");
      for (int k = 0; k < kNumClasses; ++k) {
        auto& v = pc.samples[static_cast<size_t>(k)];
        v = json_util::get_or<int>(s, class_name(static_cast<ObjectClass>(k)), v, where + ".paste.samples");
      }
    }
    c.paste = pc;
  }
  c.validate();
}

std::vector<Transform> sample_global(const AugmentConfig& config, uint64_t seed) {
  RngStream rng(seed, hash_name("augment.global"));
  std::vector<Transform> ops;
  // Fixed draw order keeps every op's sample independent of the others' outcomes.
  const bool fx = rng.bernoulli(config.flip_prob);
  const bool fy = rng.bernoulli(config.flip_prob);
  const double theta = config.rotation[0] == config.rotation[1] ? config.rotation[0]
                                                                 : rng.uniform(config.rotation[0], config.rotation[1]);
  const double s = config.scale[0] == config.scale[1] ? config.scale[0] : rng.uniform(config.scale[0], config.scale[1]);
  const Vec3 t{config.translation_std * rng.normal(), config.translation_std * rng.normal(),
               config.translation_std * rng.normal()};
  if (fx) ops.push_back(Transform::flip_x());
  if (fy) ops.push_back(Transform::flip_y());
  if (theta != 0.0) ops.push_back(Transform::rotate(theta));
  if (s != 1.0) ops.push_back(Transform::scale(s));
  if (config.translation_std > 0.0) ops.push_back(Transform::translate(t));
  return ops;
}

Scene apply_transforms(const Scene& scene, std::span<const Transform> ops) {
  Scene out = scene;
  if (ops.empty()) return out;
  for (Point& p : out.cloud.points) {
    Vec3 q{p.x, p.y, p.z};
    for (const auto& op : ops) q = transform_point(q, op);
    p.x = static_cast<float>(q.x);
    p.y = static_cast<float>(q.y);
    p.z = static_cast<float>(q.z);
  }
  for (BoxLabel& l : out.labels) {
    for (const auto& op : ops) l.box = transform_box(l.box, op);
  }
  return out;
}

Scene apply_global(const Scene& scene, const AugmentConfig& config, uint64_t seed) {
  config.validate();
  const auto ops = sample_global(config, seed);
  return apply_transforms(scene, ops);
}

size_t GtDatabase::size() const {
  size_t n = 0;
  for (const auto& s : samples) n += s.size();
  return n;
}

void GtDatabase::validate() const {
  for (const auto& list : samples) {
    for (const auto& s : list) {
      Box3D local = s.label.box;
      local.center = {};
      local.yaw = 0.0;
      for (const Point& p : s.points) {
        if (!box_contains(local, {p.x, p.y, p.z}, 1e-6)) {
          throw InvariantError("gt database: stored point lies outside its box");
        }
      }
    }
  }
}

std::vector<Point> crop_box_points(const PointCloud& cloud, const Box3D& box) {
  std::vector<Point> out;
  for (const Point& p : cloud.points) {
    if (box_contains(box, {p.x, p.y, p.z}, 1e-6)) out.push_back(p);
  }
  return out;
}

namespace {

Point to_box_frame(const Point& p, const Box3D& b) {
  const double dx = p.x - b.center.x, dy = p.y - b.center.y;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  Point q = p;
  q.x = static_cast<float>(c * dx + s * dy);
  q.y = static_cast<float>(-s * dx + c * dy);
  q.z = static_cast<float>(p.z - b.center.z);
  return q;
}

}  // namespace

GtDatabase build_gt_database(std::span<const Scene> frames) {
  GtDatabase db;
  for (const Scene& f : frames) {
    for (const BoxLabel& l : f.labels) {
      if (l.num_points < 1) continue;
      GtSample s;
      s.label = l;
      Box3D local = l.box;
      local.center = {};
      local.yaw = 0.0;
      for (const Point& p : crop_box_points(f.cloud, l.box)) {
        const Point q = to_box_frame(p, l.box);
        // Rounding into float can leave a face point a hair outside.
        if (box_contains(local, {q.x, q.y, q.z}, 1e-6)) s.points.push_back(q);
      }
      if (s.points.empty()) continue;
      s.label.num_points = static_cast<int>(s.points.size());
      db.samples[static_cast<size_t>(l.cls)].push_back(std::move(s));
    }
  }
  return db;
}

void save_gt_database(const GtDatabase& db, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["schema_version"] = 1;
  index["format"] = "float32-le x,y,z,intensity,dt";
  auto& entries = index["entries"] = nlohmann::json::array();
  for (int k = 0; k < kNumClasses; ++k) {
    const std::string file = std::string(class_name(static_cast<ObjectClass>(k))) + ".bin";
    PointCloud blob;
    for (const auto& s : db.samples[static_cast<size_t>(k)]) {
      nlohmann::json e = nlohmann::json::parse(format_label_line(s.label));
      e["file"] = file;
      e["offset"] = blob.points.size();
      e["count"] = s.points.size();
      entries.push_back(e);
      blob.points.insert(blob.points.end(), s.points.begin(), s.points.end());
    }
    save_point_file(dir / file, blob);
  }
  std::ofstream out(dir / "index.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (dir / "index.json").string());
  out << index.dump(2) << '\n';
}

GtDatabase load_gt_database(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  if (!std::filesystem::exists(index_path)) {
    throw ConfigError("gt database not found at " + dir.string());
  }
  std::ifstream in(index_path);
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  GtDatabase db;
  std::array<std::optional<PointCloud>, kNumClasses> blobs;
  for (const auto& e : index.at("entries")) {
    nlohmann::json label = e;
    const std::string file = label.at("file").get<std::string>();
    const auto offset = label.at("offset").get<size_t>();
    const auto count = label.at("count").get<size_t>();
    label.erase("file");
    label.erase("offset");
    label.erase("count");
    auto parsed = parse_labels_jsonl(label.dump());
    if (parsed.size() != 1) throw FormatError("gt database: malformed entry");
    GtSample s;
    s.label = parsed[0];
    auto& blob = blobs[static_cast<size_t>(s.label.cls)];
    if (!blob) blob = load_point_file(dir / file);
    if (offset + count > blob->size()) throw FormatError("gt database: entry exceeds " + file);
    s.points.assign(blob->points.begin() + static_cast<std::ptrdiff_t>(offset),
                    blob->points.begin() + static_cast<std::ptrdiff_t>(offset + count));
    db.samples[static_cast<size_t>(s.label.cls)].push_back(std::move(s));
  }
  return db;
}

std::vector<Point> place_sample(const GtSample& s) {
  const Box3D& b = s.label.box;
  const double c = std::cos(b.yaw), sn = std::sin(b.yaw);
  std::vector<Point> out;
  out.reserve(s.points.size());
  for (Point p : s.points) {
    const double x = p.x, y = p.y;
    p.x = static_cast<float>(b.center.x + c * x - sn * y);
    p.y = static_cast<float>(b.center.y + sn * x + c * y);
    p.z = static_cast<float>(b.center.z + p.z);
    out.push_back(p);
  }
  return out;
}

Scene paste_samples(const Scene& scene, const GtDatabase& db, const PasteConfig& config, int epoch, uint64_t seed) {
  if (epoch >= config.fade_after_epoch) return scene;
  RngStream rng(seed, hash_name("augment.paste"));
  std::vector<Box3D> occupied;
  for (const auto& l : scene.labels) occupied.push_back(l.box);
  std::vector<const GtSample*> chosen;
  for (int k = 0; k < kNumClasses; ++k) {
    const auto& pool = db.samples[static_cast<size_t>(k)];
    if (pool.empty()) continue;
    // Distinct candidates, drawn by a partial Fisher-Yates shuffle.
    std::vector<size_t> idx(pool.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const size_t want = std::min(pool.size(), static_cast<size_t>(config.samples[static_cast<size_t>(k)]));
    for (size_t i = 0; i < want; ++i) {
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      const GtSample& cand = pool[idx[i]];
      bool clear = true;
      for (const Box3D& b : occupied) {
        if (overlap_bev(cand.label.box, b).intersection > 0.0) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      occupied.push_back(cand.label.box);
      chosen.push_back(&cand);
    }
  }
  if (chosen.empty()) return scene;
  Scene out;
  out.cloud.frame_id = scene.cloud.frame_id;
  out.cloud.num_source_frames = scene.cloud.num_source_frames;
  for (const Point& p : scene.cloud.points) {
    bool inside = false;
    for (const GtSample* s : chosen) {
      if (box_contains(s->label.box, {p.x, p.y, p.z}, 1e-6)) {
        inside = true;
        break;
      }
    }
    if (!inside) out.cloud.points.push_back(p);
  }
  out.labels = scene.labels;
  for (const GtSample* s : chosen) {
    const auto pts = place_sample(*s);
    out.cloud.points.insert(out.cloud.points.end(), pts.begin(), pts.end());
    BoxLabel l = s->label;
    l.frame_id = scene.cloud.frame_id;
    out.labels.push_back(l);
  }
  return out;
}

std::vector<PastSweep> drop_frames(std::span<const PastSweep> past, double prob, uint64_t seed) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("frame drop probability must lie in [0, 1]");
  RngStream rng(seed, hash_name("augment.drop"));
  std::vector<PastSweep> out;
  for (size_t k = 0; k < past.size(); ++k) {
    const bool drop = rng.uniform() < prob;
    if (drop) continue;
    PastSweep s = past[k];
    if (s.lag <= 0) s.lag = static_cast<int>(k + 1);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace griddet
