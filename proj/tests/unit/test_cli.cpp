#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "griddet/decode.hpp"
#include "griddet/error.hpp"
#include "griddet/lidar_io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using griddet::testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = griddet::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json error_of(const Result& r) { return json::parse(r.err).at("error"); }

const std::string kSmallGrid =
    R"(grid.axes=[{"min":-12.8,"max":12.8,"cell":0.2},{"min":-12.8,"max":12.8,"cell":0.2},{"min":-2,"max":4,"cell":6}])";

// Three sweeps of random points with one label file, written under `dir`.
fs::path write_frames(const fs::path& dir) {
  std::mt19937_64 rng(31);
  griddet::FrameManifest m;
  m.sequence_id = "seq";
  std::vector<griddet::BoxLabel> labels;
  for (int i = 0; i < 3; ++i) {
    auto cloud = griddet::testing::random_cloud(rng, 800, -12.0, 12.0);
    griddet::BoxLabel l;
    l.frame_id = "f" + std::to_string(i);
    l.box.center = {2.0 + i, -1.0, 0.5};
    l.box.l = 4.0;
    l.box.w = 2.0;
    l.box.h = 1.6;
    for (int k = 0; k < 40; ++k) {
      cloud.points.push_back({static_cast<float>(l.box.center.x - 1.5 + 0.075 * k), -1.0f, 0.5f, 0.3f, 0.f});
    }
    l.num_points = 40;
    labels.push_back(l);
    const fs::path pts = dir / (l.frame_id + ".bin");
    griddet::save_point_file(pts, cloud);
    griddet::FrameEntry e;
    e.frame_id = l.frame_id;
    e.points = pts;
    e.labels = dir / "labels.jsonl";
    e.timestamp = 0.1 * i;
    m.frames.push_back(e);
  }
  griddet::save_labels(dir / "labels.jsonl", labels);
  griddet::save_manifest(dir / "frames.json", m);
  return dir / "frames.json";
}

}  // namespace

TEST_CASE("build writes a model with four backbone stages") {
  TempDir dir("cli_build");
  const auto out = (dir.path() / "model").string();
  const auto r = run({"build", "--preset", "pillar-B", "--out", out});
  REQUIRE(r.code == 0);
  const json model = json::parse(slurp(fs::path(out) / "model.json"));
  CHECK(model.at("schema_version") == 1);
  CHECK(model.at("index").at("stage_outputs").size() == 4);
  CHECK(model.at("config").at("backbone").at("channels") == json::array({64, 128, 256, 256}));
  // The echoed config matches the saved one.
  CHECK(json::parse(r.out) == model.at("config"));
  CHECK(fs::exists(fs::path(out) / "weights.bin"));

  const json manifest = json::parse(slurp(fs::path(out) / "run_manifest.json"));
  CHECK(manifest.at("command") == "build");
  CHECK(manifest.at("seed") == 0);
  CHECK(manifest.at("output_dir") == out);
  CHECK(manifest.at("schema_version") == 1);
  for (const char* key : {"tool_version", "started_at", "finished_at", "inputs", "config", "argv"}) {
    CHECK(manifest.contains(key));
  }
}

TEST_CASE("--set overrides config fields") {
  TempDir dir("cli_set");
  const auto out = (dir.path() / "m").string();
  const auto r = run({"build", "--preset", "pillar-T", "--set", "head.channels=48", "--set", "neck.kind=plain",
                      "--set", "name=custom", "--out", out});
  REQUIRE(r.code == 0);
  const json cfg = json::parse(r.out);
  CHECK(cfg.at("head").at("channels") == 48);
  CHECK(cfg.at("neck").at("kind") == "plain");
  CHECK(cfg.at("name") == "custom");

  json j = json::object();
  griddet::cli::apply_override(j, "a.b.c=[1,2]");
  griddet::cli::apply_override(j, "a.d=hello");
  CHECK(j.at("a").at("b").at("c") == json::array({1, 2}));
  CHECK(j.at("a").at("d") == "hello");
  CHECK_THROWS_AS(griddet::cli::apply_override(j, "novalue"), griddet::ConfigError);
  CHECK_THROWS_AS(griddet::cli::apply_override(j, "a.d.e=1"), griddet::ConfigError);
}

TEST_CASE("eval on the hand fixture") {
  const std::string fx = GRIDDET_DATA_DIR "/fixtures/eval";
  TempDir dir("cli_eval");
  const auto r = run({"eval", "--detections", fx + "/detections.jsonl", "--labels", fx + "/labels.jsonl", "--out",
                      dir.path().string()});
  REQUIRE(r.code == 0);
  const json report = json::parse(slurp(dir.path() / "report.json"));
  CHECK(report.at("schema_version") == 1);
  const double ap = report.at("classes").at("vehicle").at("ap");
  CHECK(std::abs(ap - 51.0 / 101.0) < 1e-9);
  CHECK(report.at("classes").at("pedestrian").at("present") == false);
  CHECK(fs::exists(dir.path() / "report.txt"));
}

TEST_CASE("infer is deterministic and replayable") {
  TempDir dir("cli_infer");
  const auto frames = write_frames(dir.path()).string();
  const auto model = (dir.path() / "model").string();
  REQUIRE(run({"build", "--preset", "pillar-T", "--set", kSmallGrid, "--out", model}).code == 0);

  const auto a = (dir.path() / "a").string();
  const auto b = (dir.path() / "b").string();
  const std::vector<std::string> base{"infer", "--model", model, "--frames", frames, "--seed", "5",
                                      "--set", "threshold=0"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
  };
  REQUIRE(run(with({"--out", a})).code == 0);
  REQUIRE(run(with({"--out", b, "--jobs", "3"})).code == 0);
  const auto first = slurp(fs::path(a) / "detections.jsonl");
  CHECK(first == slurp(fs::path(b) / "detections.jsonl"));
  // With no threshold an untrained model still emits detections, in frame order.
  const auto dets = griddet::parse_detections_jsonl(first);
  REQUIRE(!dets.empty());
  std::string last;
  for (const auto& d : dets) {
    CHECK(d.frame_id >= last);
    last = d.frame_id;
  }

  const json manifest = json::parse(slurp(fs::path(a) / "run_manifest.json"));
  CHECK(manifest.at("command") == "infer");
  CHECK(manifest.at("seed") == 5);
  CHECK(manifest.at("inputs") == json::array({model, frames}));

  fs::remove(fs::path(a) / "detections.jsonl");
  REQUIRE(run({"replay", (fs::path(a) / "run_manifest.json").string()}).code == 0);
  CHECK(slurp(fs::path(a) / "detections.jsonl") == first);

  SUBCASE("decode overrides apply") {
    const auto c = (dir.path() / "c").string();
    REQUIRE(run(with({"--set", "max_k=2", "--out", c})).code == 0);
    // Two peaks per class channel, three classes, three frames.
    const auto few = griddet::parse_detections_jsonl(slurp(fs::path(c) / "detections.jsonl"));
    CHECK(!few.empty());
    CHECK(few.size() <= 18);
  }
}

TEST_CASE("profile, bench, augment and toyfit outputs") {
  TempDir dir("cli_misc");
  const auto frames = write_frames(dir.path()).string();

  const auto p = run({"profile", "--preset", "pillar-T", "--set", kSmallGrid, "--scene", "toy", "--out",
                      (dir.path() / "p").string()});
  REQUIRE(p.code == 0);
  const json prof = json::parse(slurp(dir.path() / "p" / "profile.json"));
  CHECK(prof.at("schema_version") == 1);
  CHECK(p.out.find("#Params (M)") != std::string::npos);

  const auto b = run({"bench", "--preset", "pillar-T", "--set", kSmallGrid, "--scene", "toy", "--warmup", "0",
                      "--iters", "2"});
  REQUIRE(b.code == 0);
  const json bench = json::parse(b.out);
  CHECK(bench.at("samples_ms").size() == 2);
  CHECK(bench.at("deterministic") == true);

  const auto aug_a = (dir.path() / "aug_a").string();
  const auto aug_b = (dir.path() / "aug_b").string();
  REQUIRE(run({"augment", "--frames", frames, "--seed", "3", "--out", aug_a}).code == 0);
  REQUIRE(run({"augment", "--frames", frames, "--seed", "3", "--out", aug_b, "--jobs", "2"}).code == 0);
  CHECK(slurp(fs::path(aug_a) / "labels.jsonl") == slurp(fs::path(aug_b) / "labels.jsonl"));
  CHECK(slurp(fs::path(aug_a) / "points" / "f1.bin") == slurp(fs::path(aug_b) / "points" / "f1.bin"));
  CHECK(griddet::load_manifest(fs::path(aug_a) / "frames.json").frames.size() == 3);

  const auto t = run({"toyfit", "--steps", "5"});
  REQUIRE(t.code == 0);
  std::istringstream csv(t.out);
  std::string line;
  std::getline(csv, line);
  CHECK(line == "step,loss,best_so_far");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 6);
  CHECK(run({"toyfit", "--steps", "5"}).out == t.out);
}

TEST_CASE("errors carry exit codes and JSON") {
  TempDir dir("cli_err");
  SUBCASE("unknown config key is a configuration error") {
    const auto r = run({"build", "--preset", "pillar-T", "--set", "head.bogus=1", "--out", dir.path().string()});
    CHECK(r.code == 2);
    const auto e = error_of(r);
    CHECK(e.at("exit_code") == 2);
    CHECK(e.at("message").get<std::string>().find("bogus") != std::string::npos);
    CHECK(json::parse(r.err).at("schema_version") == 1);
  }
  SUBCASE("usage errors") {
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"eval", "--detections", "x"}).code == 2);
    CHECK(run({"build", "--preset", "pillar-XL", "--out", dir.path().string()}).code == 2);
  }
  SUBCASE("missing input file") {
    const auto r = run({"eval", "--detections", "/nonexistent.jsonl", "--labels", "/nonexistent2.jsonl"});
    CHECK(r.code != 0);
    CHECK(error_of(r).at("exit_code") == r.code);
  }
  SUBCASE("malformed data is a data error") {
    const auto bad = dir.path() / "bad.jsonl";
    std::ofstream(bad) << "{\"frame_id\": \"f0\", \"class\": \"vehicle\"\n";
    const auto r = run({"eval", "--detections", bad.string(), "--labels", bad.string()});
    CHECK(r.code == 3);
    CHECK(error_of(r).at("exit_code") == 3);
  }
  SUBCASE("failed gradient check is an invariant violation") {
    const auto r = run({"gradcheck", "--seeds", "1", "--tol", "1e-300"});
    CHECK(r.code == 4);
    CHECK(error_of(r).at("exit_code") == 4);
  }
  SUBCASE("bad replay manifest") {
    const auto m = dir.path() / "m.json";
    std::ofstream(m) << "{\"command\": \"infer\"}";
    CHECK(run({"replay", m.string()}).code == 3);
  }
}
