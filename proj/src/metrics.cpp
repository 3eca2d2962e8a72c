#include "griddet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"
#include "griddet/json_util.hpp"

namespace griddet {

void EvalConfig::validate() const {
  for (double t : iou_threshold) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval: IoU thresholds must lie in (0, 1]");
  }
  if (recall_points < 2) throw ConfigError("eval: recall_points must be >= 2");
  if (range && !(range->x_max > range->x_min && range->y_max > range->y_min)) {
    throw ConfigError("eval: range bounds must satisfy max > min");
  }
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json::object();
  j["iou_kind"] = c.iou_kind == IouKind::kBev ? "bev" : "3d";
  j["difficulty"] = c.difficulty == Difficulty::kL1 ? "L1" : "L2";
  for (int k = 0; k < kNumClasses; ++k) {
    j["iou_threshold"][class_name(static_cast<ObjectClass>(k))] = c.iou_threshold[static_cast<size_t>(k)];
  }
  j["recall_points"] = c.recall_points;
  if (c.range) {
    j["range"] = {{"x", {c.range->x_min, c.range->x_max}}, {"y", {c.range->y_min, c.range->y_max}}};
  } else {
    j["range"] = nullptr;
  }
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  const std::string where = "eval";
  json_util::check_keys(j, {"schema_version", "iou_kind", "iou_threshold", "difficulty", "recall_points", "range"},
                        where);
  c = EvalConfig{};
  const auto kind = json_util::get_or<std::string>(j, "iou_kind", "3d", where);
  if (kind == "bev") c.iou_kind = IouKind::kBev;
  else if (kind == "3d") c.iou_kind = IouKind::k3d;
  else throw ConfigError("eval.iou_kind must be 'bev' or '3d'");
  const auto diff = json_util::get_or<std::string>(j, "difficulty", "L2", where);
  if (diff == "L1") c.difficulty = Difficulty::kL1;
  else if (diff == "L2") c.difficulty = Difficulty::kL2;
  else throw ConfigError("eval.difficulty must be 'L1' or 'L2'");
  if (j.contains("iou_threshold")) {
    const auto& t = j.at("iou_threshold");
    json_util::check_keys(t, {"vehicle", "pedestrian", "cyclist"}, where + ".iou_threshold");
    for (int k = 0; k < kNumClasses; ++k) {
      auto& v = c.iou_threshold[static_cast<size_t>(k)];
      v = json_util::get_or<double>(t, class_name(static_cast<ObjectClass>(k)), v, where);
    }
  }
  c.recall_points = json_util::get_or<int>(j, "recall_points", c.recall_points, where);
  if (j.contains("range")) {
    const auto& r = j.at("range");
    if (r.is_null()) {
      c.range.reset();
    } else {
      json_util::check_keys(r, {"x", "y"}, where + ".range");
      const auto x = json_util::get<std::vector<double>>(r, "x", where);
      const auto y = json_util::get<std::vector<double>>(r, "y", where);
      if (x.size() != 2 || y.size() != 2) throw ConfigError("eval.range: x and y need [min, max]");
      c.range = EvalRange{x[0], x[1], y[0], y[1]};
    }
  }
  c.validate();
}

int min_points(Difficulty d) { return d == Difficulty::kL1 ? 5 : 1; }

std::vector<BoxLabel> filter_difficulty(std::span<const BoxLabel> labels, Difficulty level) {
  std::vector<BoxLabel> out;
  for (const auto& l : labels) {
    if (l.num_points >= min_points(level)) out.push_back(l);
  }
  return out;
}

double heading_weight(double yaw_pred, double yaw_gt) {
  double d = std::fabs(wrap_angle(yaw_pred) - wrap_angle(yaw_gt));
  d = std::min(d, 2.0 * std::numbers::pi - d);
  return std::clamp(1.0 - d / std::numbers::pi, 0.0, 1.0);
}

std::vector<Match> match_frame(std::span<const Detection> dets, std::span<const BoxLabel> labels,
                               const EvalConfig& config) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> taken(labels.size(), false);
  std::vector<Match> out;
  out.reserve(dets.size());
  for (size_t i : order) {
    const Detection& d = dets[i];
    Match m;
    m.det = i;
    const double thr = config.iou_threshold[static_cast<size_t>(d.cls)];
    for (size_t k = 0; k < labels.size(); ++k) {
      if (taken[k] || labels[k].cls != d.cls) continue;
      const double iou = config.iou_kind == IouKind::kBev ? iou_bev(d.box, labels[k].box) : iou_3d(d.box, labels[k].box);
      if (iou >= thr && iou > m.iou) {
        m.iou = iou;
        m.label = static_cast<int>(k);
      }
    }
    if (m.label >= 0) {
      taken[static_cast<size_t>(m.label)] = true;
      m.heading_weight = heading_weight(d.box.yaw, labels[static_cast<size_t>(m.label)].box.yaw);
    } else {
      m.iou = 0.0;
    }
    out.push_back(m);
  }
  return out;
}

void MatchSet::merge(const MatchSet& other) {
  matches.insert(matches.end(), other.matches.begin(), other.matches.end());
  for (size_t k = 0; k < kNumClasses; ++k) num_gt[k] += other.num_gt[k];
  num_frames += other.num_frames;
}

MatchSet evaluate_frame(std::span<const Detection> dets, std::span<const BoxLabel> labels, const EvalConfig& config) {
  std::vector<Detection> d;
  for (const auto& x : dets) {
    if (!config.range || config.range->contains(x.box.center)) d.push_back(x);
  }
  // Zero-point labels belong to no difficulty level.
  std::vector<BoxLabel> l;
  for (const auto& x : labels) {
    if (x.num_points >= 1 && (!config.range || config.range->contains(x.box.center))) l.push_back(x);
  }
  MatchSet out;
  out.num_frames = 1;
  const int need = min_points(config.difficulty);
  for (const auto& x : l) {
    if (x.num_points >= need) ++out.num_gt[static_cast<size_t>(x.cls)];
  }
  for (const Match& m : match_frame(d, l, config)) {
    const Detection& det = d[m.det];
    if (m.label >= 0 && l[static_cast<size_t>(m.label)].num_points < need) continue;
    out.matches.push_back({det.cls, det.score, m.label >= 0, m.label >= 0 ? m.heading_weight : 0.0});
  }
  return out;
}

EvalResult compute_ap_aph(const MatchSet& set, const EvalConfig& config) {
  EvalResult res;
  res.config = config;
  res.num_frames = set.num_frames;
  for (int k = 0; k < kNumClasses; ++k) {
    ClassResult cr;
    cr.cls = static_cast<ObjectClass>(k);
    cr.num_gt = set.num_gt[static_cast<size_t>(k)];
    cr.present = cr.num_gt > 0;
    std::vector<ScoredMatch> ms;
    for (const auto& m : set.matches) {
      if (m.cls == cr.cls) ms.push_back(m);
    }
    // Scores only; ties form one threshold so frame order cannot matter.
    std::sort(ms.begin(), ms.end(), [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
    int64_t tp = 0;
    int64_t fp = 0;
    double tpw = 0.0;
    for (size_t i = 0; i < ms.size();) {
      size_t j = i;
      double group_w = 0.0;
      for (; j < ms.size() && ms[j].score == ms[i].score; ++j) {
        if (ms[j].tp) {
          ++tp;
          group_w += ms[j].weight;
        } else {
          ++fp;
        }
      }
      tpw += group_w;
      if (cr.present) {
        const double n = static_cast<double>(tp + fp);
        const double g = static_cast<double>(cr.num_gt);
        cr.curve.push_back({ms[i].score, tp / g, tp / n, tpw / g, tpw / n});
      }
      i = j;
    }
    cr.tp = tp;
    cr.fp = fp;
    cr.fn = cr.num_gt - tp;
    if (cr.present) {
      const int n = config.recall_points;
      double ap = 0.0;
      double aph = 0.0;
      for (int s = 0; s < n; ++s) {
        const double r = static_cast<double>(s) / (n - 1);
        double best = 0.0;
        double best_h = 0.0;
        for (const auto& p : cr.curve) {
          if (p.recall >= r - 1e-12) best = std::max(best, p.precision);
          if (p.recall_h >= r - 1e-12) best_h = std::max(best_h, p.precision_h);
        }
        ap += best;
        aph += best_h;
      }
      cr.ap = ap / n;
      cr.aph = aph / n;
    }
    res.classes.push_back(std::move(cr));
  }
  return res;
}

EvalResult evaluate(std::span<const Detection> dets, std::span<const BoxLabel> labels, const EvalConfig& config) {
  config.validate();
  std::map<std::string, std::pair<std::vector<Detection>, std::vector<BoxLabel>>> frames;
  for (const auto& d : dets) frames[d.frame_id].first.push_back(d);
  for (const auto& l : labels) frames[l.frame_id].second.push_back(l);
  MatchSet all;
  for (const auto& [id, f] : frames) all.merge(evaluate_frame(f.first, f.second, config));
  return compute_ap_aph(all, config);
}

nlohmann::json eval_report_json(const EvalResult& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = r.config;
  j["num_frames"] = r.num_frames;
  auto& classes = j["classes"] = nlohmann::json::object();
  double ap_sum = 0.0;
  double aph_sum = 0.0;
  int present = 0;
  for (const auto& c : r.classes) {
    nlohmann::json cj;
    cj["present"] = c.present;
    cj["num_gt"] = c.num_gt;
    cj["tp"] = c.tp;
    cj["fp"] = c.fp;
    cj["fn"] = c.fn;
    if (c.present) {
      cj["ap"] = c.ap;
      cj["aph"] = c.aph;
      auto pr = nlohmann::json::array();
      for (const auto& p : c.curve) {
        pr.push_back({{"score", p.score}, {"recall", p.recall}, {"precision", p.precision},
                      {"recall_h", p.recall_h}, {"precision_h", p.precision_h}});
      }
      cj["pr_curve"] = pr;
      ap_sum += c.ap;
      aph_sum += c.aph;
      ++present;
    } else {
      cj["ap"] = nullptr;
      cj["aph"] = nullptr;
    }
    classes[class_name(c.cls)] = cj;
  }
  if (present > 0) {
    j["mean"] = {{"ap", ap_sum / present}, {"aph", aph_sum / present}};
  } else {
    j["mean"] = {{"ap", nullptr}, {"aph", nullptr}};
  }
  return j;
}

std::string eval_report_table(const EvalResult& r) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "class" << std::right << std::setw(10) << "AP" << std::setw(10) << "APH"
     << std::setw(8) << "GT" << std::setw(8) << "TP" << std::setw(8) << "FP" << std::setw(8) << "FN" << '\n';
  for (const auto& c : r.classes) {
    os << std::left << std::setw(12) << class_name(c.cls) << std::right;
    if (c.present) {
      os << std::fixed << std::setprecision(4) << std::setw(10) << c.ap << std::setw(10) << c.aph;
    } else {
      os << std::setw(10) << "absent" << std::setw(10) << "absent";
    }
    os << std::setw(8) << c.num_gt << std::setw(8) << c.tp << std::setw(8) << c.fp << std::setw(8) << c.fn << '\n';
  }
  return os.str();
}

}  // namespace griddet
