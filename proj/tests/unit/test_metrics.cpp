#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "griddet/metrics.hpp"

using namespace griddet;

namespace {

constexpr double kPi = std::numbers::pi;

BoxLabel label(const std::string& frame, double x, double y, double yaw = 0.0, int points = 20,
               ObjectClass cls = ObjectClass::kVehicle) {
  BoxLabel l;
  l.frame_id = frame;
  l.box.center = {x, y, 0.0};
  l.box.l = 4.0;
  l.box.w = 2.0;
  l.box.h = 1.5;
  l.box.yaw = yaw;
  l.cls = cls;
  l.num_points = points;
  return l;
}

Detection det(const std::string& frame, double x, double y, double score, double yaw = 0.0,
              ObjectClass cls = ObjectClass::kVehicle) {
  Detection d;
  d.frame_id = frame;
  d.box.center = {x, y, 0.0};
  d.box.l = 4.0;
  d.box.w = 2.0;
  d.box.h = 1.5;
  d.box.yaw = yaw;
  d.cls = cls;
  d.score = score;
  return d;
}

const ClassResult& vehicle(const EvalResult& r) {
  for (const auto& c : r.classes) {
    if (c.cls == ObjectClass::kVehicle) return c;
  }
  FAIL("no vehicle row");
  return r.classes.front();
}

// 101-point interpolated AP from (score, tp) lists, computed directly.
double reference_ap(std::vector<std::pair<double, double>> scored, int num_gt) {
  std::stable_sort(scored.begin(), scored.end(), [](auto& a, auto& b) { return a.first > b.first; });
  std::vector<double> rec, prec;
  double tp = 0;
  for (size_t i = 0; i < scored.size(); ++i) {
    tp += scored[i].second;
    rec.push_back(tp / num_gt);
    prec.push_back(tp / static_cast<double>(i + 1));
  }
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    double best = 0;
    for (size_t i = 0; i < rec.size(); ++i) {
      if (rec[i] >= r - 1e-12) best = std::max(best, prec[i]);
    }
    sum += best;
  }
  return sum / 101.0;
}

}  // namespace

TEST_CASE("difficulty levels") {
  const std::vector<BoxLabel> ls{label("f", 0, 0, 0, 4), label("f", 10, 0, 0, 0), label("f", 20, 0, 0, 5)};
  const auto l1 = filter_difficulty(ls, Difficulty::kL1);
  const auto l2 = filter_difficulty(ls, Difficulty::kL2);
  REQUIRE(l1.size() == 1);
  CHECK(l1[0].num_points == 5);
  REQUIRE(l2.size() == 2);
  CHECK(l2[0].num_points == 4);
  CHECK(filter_difficulty(std::vector<BoxLabel>{}, Difficulty::kL1).empty());
  CHECK(min_points(Difficulty::kL1) == 5);
  CHECK(min_points(Difficulty::kL2) == 1);
}

TEST_CASE("match_frame") {
  EvalConfig cfg;
  cfg.iou_kind = IouKind::kBev;
  SUBCASE("IoU above threshold is a TP") {
    // Shifted by 0.4 m along the 4 m side: IoU = 3.6/4.4 = 0.818.
    const std::vector<Detection> d{det("f", 0.4, 0, 0.9)};
    const std::vector<BoxLabel> l{label("f", 0, 0)};
    const auto m = match_frame(d, l, cfg);
    REQUIRE(m.size() == 1);
    CHECK(m[0].label == 0);
    CHECK(m[0].iou == doctest::Approx(3.6 / 4.4));
  }
  SUBCASE("duplicate on one label is an FP") {
    const std::vector<Detection> d{det("f", 0, 0, 0.8), det("f", 0.1, 0, 0.9)};
    const std::vector<BoxLabel> l{label("f", 0, 0)};
    const auto m = match_frame(d, l, cfg);
    REQUIRE(m.size() == 2);
    // The higher score takes the label.
    for (const auto& x : m) CHECK(x.label == (x.det == 1 ? 0 : -1));
  }
  SUBCASE("greedy rule re-executed by brute force") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> pos(-4, 4), score(0, 1), yaw(-0.3, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<BoxLabel> l;
      std::vector<Detection> d;
      for (int i = 0; i < 20; ++i) l.push_back(label("f", pos(rng) * 3, pos(rng) * 3));
      for (int i = 0; i < 20; ++i) {
        const auto& g = l[static_cast<size_t>(i)];
        d.push_back(det("f", g.box.center.x + 0.3 * pos(rng), g.box.center.y + 0.3 * pos(rng), score(rng), yaw(rng)));
      }
      const auto m = match_frame(d, l, cfg);
      // Oracle: each detection in score order takes the free best-IoU label.
      std::vector<size_t> order(d.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return d[a].score > d[b].score; });
      std::vector<bool> used(l.size(), false);
      std::vector<int> want(d.size(), -1);
      for (size_t i : order) {
        int best = -1;
        double best_iou = 0;
        for (size_t j = 0; j < l.size(); ++j) {
          if (used[j]) continue;
          const double iou = iou_bev(d[i].box, l[j].box);
          if (iou >= 0.7 && iou > best_iou) {
            best = static_cast<int>(j);
            best_iou = iou;
          }
        }
        if (best >= 0) used[static_cast<size_t>(best)] = true;
        want[i] = best;
      }
      REQUIRE(m.size() == d.size());
      for (const auto& x : m) CHECK(x.label == want[x.det]);
    }
  }
  SUBCASE("classes do not match each other") {
    const std::vector<Detection> d{det("f", 0, 0, 0.9, 0, ObjectClass::kCyclist)};
    const std::vector<BoxLabel> l{label("f", 0, 0)};
    CHECK(match_frame(d, l, cfg)[0].label == -1);
  }
}

TEST_CASE("heading weight") {
  CHECK(heading_weight(0.3, 0.3) == 1.0);
  CHECK(heading_weight(0.0, kPi) == doctest::Approx(0.0));
  CHECK(heading_weight(kPi - 0.1, -kPi + 0.1) == doctest::Approx(1.0 - 0.2 / kPi));
  CHECK(heading_weight(0.0, kPi / 2) == doctest::Approx(0.5));
}

TEST_CASE("AP and APH examples") {
  EvalConfig cfg;
  SUBCASE("one exact TP") {
    const auto r = evaluate(std::vector<Detection>{det("f", 5, 5, 0.7)}, std::vector<BoxLabel>{label("f", 5, 5)}, cfg);
    CHECK(vehicle(r).ap == doctest::Approx(1.0));
    CHECK(vehicle(r).aph == doctest::Approx(1.0));
  }
  SUBCASE("heading off by pi") {
    const auto r = evaluate(std::vector<Detection>{det("f", 5, 5, 0.7, kPi)},
                            std::vector<BoxLabel>{label("f", 5, 5, 0.0)}, cfg);
    CHECK(vehicle(r).ap == doctest::Approx(1.0));
    CHECK(vehicle(r).aph == doctest::Approx(0.0));
  }
  SUBCASE("TP then FP over two labels is 51/101") {
    const std::vector<BoxLabel> l{label("f0", 10, 0), label("f0", 30, 5)};
    const std::vector<Detection> d{det("f0", 10, 0, 0.9), det("f0", 50, -10, 0.8)};
    const auto r = evaluate(d, l, cfg);
    CHECK(vehicle(r).ap == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
    CHECK(vehicle(r).tp == 1);
    CHECK(vehicle(r).fp == 1);
    CHECK(vehicle(r).fn == 1);
  }
  SUBCASE("absent classes are reported as absent") {
    const auto r = evaluate(std::vector<Detection>{}, std::vector<BoxLabel>{label("f", 0, 0)}, cfg);
    for (const auto& c : r.classes) CHECK(c.present == (c.cls == ObjectClass::kVehicle));
    CHECK(vehicle(r).ap == 0.0);
  }
}

TEST_CASE("AP properties on random frames") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(-60, 60), jitter(-0.6, 0.6), score(0.0, 1.0), yaw(-kPi, kPi);
  std::bernoulli_distribution miss(0.3), fp(0.3);
  EvalConfig cfg;
  cfg.iou_kind = IouKind::kBev;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<BoxLabel> l;
    std::vector<Detection> d;
    for (int f = 0; f < 4; ++f) {
      const std::string fid = "frame" + std::to_string(f);
      for (int i = 0; i < 15; ++i) {
        const auto g = label(fid, pos(rng), pos(rng), yaw(rng));
        l.push_back(g);
        if (!miss(rng)) {
          d.push_back(det(fid, g.box.center.x + jitter(rng), g.box.center.y + jitter(rng), score(rng),
                          wrap_angle(g.box.yaw + 0.5 * jitter(rng))));
        }
        if (fp(rng)) d.push_back(det(fid, pos(rng), pos(rng), score(rng), yaw(rng)));
      }
    }
    const auto base = evaluate(d, l, cfg);
    const auto& v = vehicle(base);
    CHECK(v.aph <= v.ap + 1e-12);
    CHECK(v.ap >= 0.0);
    CHECK(v.ap <= 1.0);

    // Pooled AP matches a direct 101-point evaluation over the same matches.
    std::vector<std::pair<double, double>> scored;
    MatchSet all;
    for (int f = 0; f < 4; ++f) {
      const std::string fid = "frame" + std::to_string(f);
      std::vector<Detection> fd;
      std::vector<BoxLabel> fl;
      for (const auto& x : d) if (x.frame_id == fid) fd.push_back(x);
      for (const auto& x : l) if (x.frame_id == fid) fl.push_back(x);
      all.merge(evaluate_frame(fd, fl, cfg));
    }
    for (const auto& m : all.matches) scored.push_back({m.score, m.tp ? 1.0 : 0.0});
    CHECK(v.ap == doctest::Approx(reference_ap(scored, static_cast<int>(all.num_gt[0]))).epsilon(1e-12));

    // Strictly monotone score transform.
    auto warped = d;
    for (auto& x : warped) x.score = std::pow(x.score, 3.0) * 0.5;
    CHECK(vehicle(evaluate(warped, l, cfg)).ap == doctest::Approx(v.ap).epsilon(1e-12));

    // Frame order independence.
    auto shuffled_d = d;
    auto shuffled_l = l;
    std::shuffle(shuffled_d.begin(), shuffled_d.end(), rng);
    std::shuffle(shuffled_l.begin(), shuffled_l.end(), rng);
    CHECK(vehicle(evaluate(shuffled_d, shuffled_l, cfg)).ap == doctest::Approx(v.ap).epsilon(1e-12));

    // A new lowest-score FP never raises AP.
    auto more = d;
    more.push_back(det("frame0", 70, 70, -1.0));
    more.back().score = 0.0;
    CHECK(vehicle(evaluate(more, l, cfg)).ap <= v.ap + 1e-12);
  }
}

TEST_CASE("APH equals AP only with exact headings") {
  EvalConfig cfg;
  const std::vector<BoxLabel> l{label("f", 0, 0, 0.2), label("f", 20, 0, -1.0)};
  const std::vector<Detection> exact{det("f", 0, 0, 0.9, 0.2), det("f", 20, 0, 0.8, -1.0)};
  auto r = evaluate(exact, l, cfg);
  CHECK(vehicle(r).aph == doctest::Approx(vehicle(r).ap));
  auto off = exact;
  off[1].box.yaw = -0.9;
  r = evaluate(off, l, cfg);
  CHECK(vehicle(r).aph < vehicle(r).ap);
}

TEST_CASE("range filtering drops far boxes") {
  EvalConfig cfg;
  const std::vector<BoxLabel> l{label("f", 0, 0), label("f", 80, 0)};
  const std::vector<Detection> d{det("f", 0, 0, 0.9), det("f", 90, 0, 0.95)};
  const auto r = evaluate(d, l, cfg);
  CHECK(vehicle(r).num_gt == 1);
  CHECK(vehicle(r).ap == doctest::Approx(1.0));
}

TEST_CASE("eval report formats") {
  EvalConfig cfg;
  const auto r = evaluate(std::vector<Detection>{det("f", 5, 5, 0.7)}, std::vector<BoxLabel>{label("f", 5, 5)}, cfg);
  const auto table = eval_report_table(r);
  CHECK(table.find("vehicle") != std::string::npos);
  CHECK(table.find("APH") != std::string::npos);
}
