#include "griddet/decode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"
#include "griddet/json_util.hpp"

namespace griddet {

double sigmoid(double logit) {
  if (logit >= 0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

std::vector<Peak> extract_peaks(const DenseTensor& heatmap, int max_k, double threshold) {
  std::vector<Peak> out;
  const int32_t h = heatmap.dims[1];
  const int32_t w = heatmap.dims[2];
  for (int c = 0; c < heatmap.channels; ++c) {
    std::vector<Peak> found;
    for (int32_t r = 0; r < h; ++r) {
      for (int32_t q = 0; q < w; ++q) {
        const float v = heatmap.at(c, r, q);
        bool peak = true;
        for (int dr = -1; dr <= 1 && peak; ++dr) {
          for (int dq = -1; dq <= 1; ++dq) {
            if (dr == 0 && dq == 0) continue;
            const int32_t rr = r + dr;
            const int32_t qq = q + dq;
            if (rr < 0 || rr >= h || qq < 0 || qq >= w) continue;
            const float u = heatmap.at(c, rr, qq);
            // A neighbour wins with a larger value, or an equal value at a
            // smaller coordinate.
            if (u > v || (u == v && (dr < 0 || (dr == 0 && dq < 0)))) {
              peak = false;
              break;
            }
          }
        }
        if (!peak) continue;
        const double s = sigmoid(v);
        if (s > threshold) found.push_back({c, r, q, s});
      }
    }
    std::stable_sort(found.begin(), found.end(), [](const Peak& a, const Peak& b) { return a.score > b.score; });
    if (max_k >= 0 && found.size() > static_cast<size_t>(max_k)) found.resize(static_cast<size_t>(max_k));
    out.insert(out.end(), found.begin(), found.end());
  }
  return out;
}

OutputGeometry OutputGeometry::of(const ModelConfig& config) {
  return {config.grid.axes[0].min, config.grid.axes[1].min, config.output_cell()};
}

BoxTarget encode_target(const Box3D& box, const OutputGeometry& geom) {
  BoxTarget t;
  const double gx = (box.center.x - geom.x_min) / geom.cell;
  const double gy = (box.center.y - geom.y_min) / geom.cell;
  t.col = static_cast<int32_t>(std::floor(gx));
  t.row = static_cast<int32_t>(std::floor(gy));
  t.offset_x = gx - t.col;
  t.offset_y = gy - t.row;
  t.z = box.center.z;
  t.log_dims = {std::log(box.l), std::log(box.w), std::log(box.h)};
  t.sin_yaw = std::sin(box.yaw);
  t.cos_yaw = std::cos(box.yaw);
  return t;
}

double rescore(double score, double iou_pred, double alpha) {
  const double iou = std::clamp(iou_pred, 0.0, 1.0);
  return std::pow(score, 1.0 - alpha) * std::pow(iou, alpha);
}

std::vector<Detection> decode_boxes(std::span<const Peak> peaks, const GroupOutput& group,
                                    const OutputGeometry& geom, const DecodeConfig& config,
                                    const std::string& frame_id) {
  std::vector<Detection> out;
  out.reserve(peaks.size());
  for (const Peak& p : peaks) {
    if (p.channel < 0 || static_cast<size_t>(p.channel) >= group.classes.size()) {
      throw InvariantError("peak channel outside the head group");
    }
    Detection d;
    d.frame_id = frame_id;
    d.cls = group.classes[static_cast<size_t>(p.channel)];
    d.peak_row = p.row;
    d.peak_col = p.col;
    d.box.center.x = geom.x_min + (p.col + group.offset.at(0, p.row, p.col)) * geom.cell;
    d.box.center.y = geom.y_min + (p.row + group.offset.at(1, p.row, p.col)) * geom.cell;
    d.box.center.z = group.z.at(0, p.row, p.col);
    d.box.l = std::exp(static_cast<double>(group.dims.at(0, p.row, p.col)));
    d.box.w = std::exp(static_cast<double>(group.dims.at(1, p.row, p.col)));
    d.box.h = std::exp(static_cast<double>(group.dims.at(2, p.row, p.col)));
    d.box.yaw = wrap_angle(std::atan2(static_cast<double>(group.yaw.at(0, p.row, p.col)),
                                      static_cast<double>(group.yaw.at(1, p.row, p.col))));
    if (group.velocity) {
      d.box.velocity = Vec2{group.velocity->at(0, p.row, p.col), group.velocity->at(1, p.row, p.col)};
    }
    d.score = p.score;
    if (group.iou) {
      d.score = rescore(p.score, group.iou->at(0, p.row, p.col), config.alpha[static_cast<size_t>(d.cls)]);
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Detection> nms_rotated(std::span<const Detection> dets,
                                   const std::array<double, kNumClasses>& iou_threshold) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  std::vector<size_t> kept;
  for (size_t i : order) {
    const Detection& d = dets[i];
    bool suppressed = false;
    for (size_t k : kept) {
      if (dets[k].cls != d.cls) continue;
      if (iou_bev(dets[k].box, d.box) > iou_threshold[static_cast<size_t>(d.cls)]) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (size_t k : kept) out.push_back(dets[k]);
  return out;
}

std::vector<Detection> decode_frame(const HeadOutput& head, const OutputGeometry& geom,
                                    const DecodeConfig& config, const std::string& frame_id) {
  std::vector<Detection> all;
  for (const auto& g : head.groups) {
    const auto peaks = extract_peaks(g.heatmap, config.max_k, config.threshold);
    auto dets = decode_boxes(peaks, g, geom, config, frame_id);
    all.insert(all.end(), std::make_move_iterator(dets.begin()), std::make_move_iterator(dets.end()));
  }
  if (config.nms) return nms_rotated(all, config.nms_iou);
  std::stable_sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return all;
}

namespace {

std::array<double, kNumClasses> per_class(const nlohmann::json& j, const char* key,
                                          std::array<double, kNumClasses> fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_number()) {
    fallback.fill(v.get<double>());
    return fallback;
  }
  json_util::check_keys(v, {"vehicle", "pedestrian", "cyclist"}, where + "." + key);
  for (int c = 0; c < kNumClasses; ++c) {
    const char* name = class_name(static_cast<ObjectClass>(c));
    fallback[static_cast<size_t>(c)] = json_util::get_or<double>(v, name, fallback[static_cast<size_t>(c)], where);
  }
  return fallback;
}

nlohmann::json per_class_json(const std::array<double, kNumClasses>& a) {
  nlohmann::json j;
  for (int c = 0; c < kNumClasses; ++c) j[class_name(static_cast<ObjectClass>(c))] = a[static_cast<size_t>(c)];
  return j;
}

}  // namespace

void to_json(nlohmann::json& j, const DecodeConfig& c) {
  j = {{"max_k", c.max_k},
       {"threshold", c.threshold},
       {"alpha", per_class_json(c.alpha)},
       {"nms_iou", per_class_json(c.nms_iou)},
       {"nms", c.nms}};
}

void from_json(const nlohmann::json& j, DecodeConfig& c) {
  const std::string where = "decode";
  json_util::check_keys(j, {"max_k", "threshold", "alpha", "nms_iou", "nms"}, where);
  c = DecodeConfig{};
  c.max_k = json_util::get_or<int>(j, "max_k", c.max_k, where);
  c.threshold = json_util::get_or<double>(j, "threshold", c.threshold, where);
  c.alpha = per_class(j, "alpha", c.alpha, where);
  c.nms_iou = per_class(j, "nms_iou", c.nms_iou, where);
  c.nms = json_util::get_or<bool>(j, "nms", c.nms, where);
  if (c.max_k < 1) throw ConfigError("decode.max_k must be >= 1");
  if (!(c.threshold >= 0.0 && c.threshold < 1.0)) throw ConfigError("decode.threshold must lie in [0, 1)");
  for (size_t k = 0; k < kNumClasses; ++k) {
    if (!(c.alpha[k] >= 0.0 && c.alpha[k] <= 1.0)) throw ConfigError("decode.alpha must lie in [0, 1]");
    if (!(c.nms_iou[k] >= 0.0 && c.nms_iou[k] <= 1.0)) throw ConfigError("decode.nms_iou must lie in [0, 1]");
  }
}

std::string format_detection_line(const Detection& d) {
  nlohmann::json j;
  j["frame_id"] = d.frame_id;
  j["class"] = class_name(d.cls);
  j["score"] = d.score;
  j["center"] = {d.box.center.x, d.box.center.y, d.box.center.z};
  j["dims"] = {d.box.l, d.box.w, d.box.h};
  j["yaw"] = d.box.yaw;
  if (d.box.velocity) j["velocity"] = {d.box.velocity->x, d.box.velocity->y};
  return j.dump();
}

std::vector<Detection> parse_detections_jsonl(const std::string& text) {
  std::vector<Detection> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "detections line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": " + e.what());
    }
    try {
      json_util::check_keys(j, {"frame_id", "class", "score", "center", "dims", "yaw", "velocity"}, where);
      Detection d;
      d.frame_id = json_util::get<std::string>(j, "frame_id", where);
      d.cls = parse_class(json_util::get<std::string>(j, "class", where));
      d.score = json_util::get<double>(j, "score", where);
      const auto c = json_util::get<std::vector<double>>(j, "center", where);
      const auto s = json_util::get<std::vector<double>>(j, "dims", where);
      if (c.size() != 3 || s.size() != 3) throw ValidationError(where + ": center/dims need 3 values");
      d.box.center = {c[0], c[1], c[2]};
      d.box.l = s[0];
      d.box.w = s[1];
      d.box.h = s[2];
      d.box.yaw = json_util::get<double>(j, "yaw", where);
      if (j.contains("velocity") && !j["velocity"].is_null()) {
        const auto v = json_util::get<std::vector<double>>(j, "velocity", where);
        if (v.size() != 2) throw ValidationError(where + ": velocity needs 2 values");
        d.box.velocity = Vec2{v[0], v[1]};
      }
      if (!(d.score >= 0.0 && d.score <= 1.0)) throw ValidationError(where + ": score must lie in [0, 1]");
      validate_box(d.box);
      out.push_back(std::move(d));
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<Detection> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_detections_jsonl(ss.str());
}

}  // namespace griddet
