#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "griddet/error.hpp"
#include "griddet/grid_spec.hpp"
#include "griddet/lidar_io.hpp"
#include "support.hpp"

using namespace griddet;
using griddet::testing::TempDir;

namespace {

std::vector<uint8_t> f32_bytes(std::initializer_list<float> values) {
  std::vector<uint8_t> out;
  for (float v : values) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<uint8_t>(u >> (8 * b)));
  }
  return out;
}

std::vector<uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("two records decode exactly") {
  const auto bytes = f32_bytes({1, 2, 3, 0.5f, 0, -4, 5.25f, -6, 1, -0.1f});
  const PointCloud c = decode_points(bytes);
  REQUIRE(c.size() == 2);
  CHECK(c.points[0] == Point{1, 2, 3, 0.5f, 0});
  CHECK(c.points[1] == Point{-4, 5.25f, -6, 1, -0.1f});
}

TEST_CASE("empty file gives an empty cloud") {
  TempDir dir("io_empty");
  write_bytes(dir / "e.bin", {});
  CHECK(load_point_file(dir / "e.bin").empty());
}

TEST_CASE("save of load is byte identical on a random file") {
  TempDir dir("io_rt");
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> xyz(-80, 80), u(0, 1), dt(-0.3f, 0);
  std::vector<uint8_t> bytes;
  for (int i = 0; i < 1000; ++i) {
    const auto rec = f32_bytes({xyz(rng), xyz(rng), xyz(rng), u(rng), dt(rng)});
    bytes.insert(bytes.end(), rec.begin(), rec.end());
  }
  write_bytes(dir / "a.bin", bytes);
  const PointCloud c = load_point_file(dir / "a.bin");
  CHECK(c.size() == 1000);
  save_point_file(dir / "b.bin", c);
  CHECK(read_bytes(dir / "b.bin") == bytes);
}

TEST_CASE("truncated file reports the byte offset") {
  auto bytes = f32_bytes({1, 2, 3, 0.5f, 0, 1, 2});
  try {
    decode_points(bytes);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset 20") != std::string::npos);
    CHECK(e.kind() == ErrorKind::kData);
  }
}

TEST_CASE("non-finite value reports the record index") {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const auto bytes = f32_bytes({1, 2, 3, 0.5f, 0, 1, nan, 3, 0.5f, 0});
  try {
    decode_points(bytes);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("record 1") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_points(f32_bytes({0, 0, 0, 0.5f, 0.2f})), ValidationError);   // dt > 0
  CHECK_THROWS_AS(decode_points(f32_bytes({0, 0, 0, 1.5f, 0})), ValidationError);      // intensity
}

TEST_CASE("xyzi schema reads four columns and zero dt") {
  const PointCloud c = decode_points(f32_bytes({1, 2, 3, 0.25f}), PointSchema::xyzi());
  REQUIRE(c.size() == 1);
  CHECK(c.points[0] == Point{1, 2, 3, 0.25f, 0});
}

TEST_CASE("assemble_frames") {
  PointCloud cur;
  cur.points = {{0, 0, 0, 0.5f, 0}};
  PointCloud past_cloud;
  past_cloud.points = {{2, 3, 4, 0.25f, 0}, {0, 0, 0, 0.75f, 0}};

  SUBCASE("identity poses keep xyz and shift dt by one gap") {
    const PastSweep past[] = {{past_cloud, Pose::identity()}};
    const PointCloud out = assemble_frames(cur, past, Pose::identity(), 3);
    REQUIRE(out.size() == 3);
    CHECK(out.points[0] == cur.points[0]);
    CHECK(out.points[1].x == 2);
    CHECK(out.points[1].y == 3);
    CHECK(out.points[1].z == 4);
    CHECK(out.points[1].dt == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(out.num_source_frames == 2);
  }
  SUBCASE("max_frames 1 returns the current cloud") {
    const PastSweep past[] = {{past_cloud, Pose::identity()}};
    const PointCloud out = assemble_frames(cur, past, Pose::identity(), 1);
    CHECK(out.points == cur.points);
  }
  SUBCASE("past translation moves points into the current frame") {
    const PastSweep past[] = {{past_cloud, Pose::from_yaw(0.0, {1, 0, 0})}};
    const PointCloud out = assemble_frames(cur, past, Pose::identity(), 2);
    CHECK(out.points[2].x == doctest::Approx(1.0));
    CHECK(out.points[2].y == doctest::Approx(0.0));
  }
  SUBCASE("current pose is inverted") {
    const PastSweep past[] = {{past_cloud, Pose::identity()}};
    const PointCloud out = assemble_frames(cur, past, Pose::from_yaw(0.0, {0, 5, 0}), 2);
    CHECK(out.points[2].y == doctest::Approx(-5.0));
  }
  SUBCASE("most recent sweeps are kept first, with growing lag") {
    const PastSweep past[] = {{past_cloud, Pose::identity()}, {past_cloud, Pose::identity()},
                              {past_cloud, Pose::identity()}};
    const PointCloud out = assemble_frames(cur, past, Pose::identity(), 3);
    REQUIRE(out.size() == 5);
    CHECK(out.points[3].dt == doctest::Approx(-0.2).epsilon(1e-6));
  }
  SUBCASE("explicit lag overrides the position") {
    const PastSweep past[] = {{past_cloud, Pose::identity(), 2}};
    const PointCloud out = assemble_frames(cur, past, Pose::identity(), 3);
    CHECK(out.points[1].dt == doctest::Approx(-0.2).epsilon(1e-6));
  }
  SUBCASE("non-rigid pose is rejected") {
    Pose bad;
    bad.rotation = {2, 0, 0, 0, 1, 0, 0, 0, 1};
    const PastSweep past[] = {{past_cloud, bad}};
    CHECK_THROWS_AS(assemble_frames(cur, past, Pose::identity(), 2), ValidationError);
    Pose mirror;
    mirror.rotation = {-1, 0, 0, 0, 1, 0, 0, 0, 1};
    const PastSweep past2[] = {{past_cloud, mirror}};
    CHECK_THROWS_AS(assemble_frames(cur, past2, Pose::identity(), 2), ValidationError);
  }
}

TEST_CASE("identity-pose assembly is concatenation that only rewrites dt") {
  std::mt19937_64 rng(3);
  const PointCloud cur = griddet::testing::random_cloud(rng, 50, -10, 10);
  const PointCloud a = griddet::testing::random_cloud(rng, 40, -10, 10);
  const PointCloud b = griddet::testing::random_cloud(rng, 30, -10, 10);
  const PastSweep past[] = {{a, Pose::identity()}, {b, Pose::identity()}};
  const PointCloud out = assemble_frames(cur, past, Pose::identity(), 3, 0.05);
  REQUIRE(out.size() == 120);
  for (size_t i = 0; i < 40; ++i) {
    Point p = out.points[50 + i];
    CHECK(p.dt == doctest::Approx(a.points[i].dt - 0.05).epsilon(1e-6));
    p.dt = a.points[i].dt;
    CHECK(p == a.points[i]);
  }
}

TEST_CASE("crop_range") {
  const GridSpec spec = GridSpec::default_pillar();
  PointCloud c;
  c.points = {{80.0f, 0, 0, 0, 0}, {-76.8f, 0, 0, 0, 0}, {0, 0, 0, 0, 0}, {76.8f, 0, 0, 0, 0}};
  const PointCloud out = crop_range(c, spec);
  REQUIRE(out.size() == 2);
  CHECK(out.points[0].x == -76.8f);
  CHECK(out.points[1].x == 0.0f);

  std::mt19937_64 rng(5);
  const PointCloud r = griddet::testing::random_cloud(rng, 100, -100, 100, -100, 100);
  size_t expected = 0;
  for (const auto& p : r.points) {
    expected += (p.x >= -76.8 && p.x < 76.8 && p.y >= -76.8 && p.y < 76.8 && p.z >= -2.0 && p.z < 4.0) ? 1 : 0;
  }
  const PointCloud once = crop_range(r, spec);
  CHECK(once.size() == expected);
  CHECK(crop_range(once, spec).points == once.points);
}

TEST_CASE("labels JSON Lines round trip and validation") {
  BoxLabel l;
  l.frame_id = "f";
  l.box.center = {1.5, -2, 0.25};
  l.box.l = 4;
  l.box.w = 2;
  l.box.h = 1.5;
  l.box.yaw = 0.3;
  l.box.velocity = Vec2{1, -1};
  l.cls = ObjectClass::kCyclist;
  l.num_points = 12;
  const auto parsed = parse_labels_jsonl(format_label_line(l) + "\n\n");
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].cls == ObjectClass::kCyclist);
  CHECK(parsed[0].num_points == 12);
  CHECK(parsed[0].box.velocity->y == -1);

  CHECK_THROWS_AS(parse_labels_jsonl(R"({"frame_id":"f","center":[0,0,0],"dims":[0,1,1],"yaw":0,"class":"vehicle","num_points":1})"),
                  ValidationError);
  CHECK_THROWS_AS(parse_labels_jsonl(R"({"frame_id":"f","center":[0,0,0],"dims":[1,1,1],"yaw":4,"class":"vehicle","num_points":1})"),
                  ValidationError);
  CHECK_THROWS_AS(parse_labels_jsonl(R"({"frame_id":"f","center":[0,0,0],"dims":[1,1,1],"yaw":0,"class":"bus","num_points":1})"),
                  ValidationError);
  CHECK_THROWS_AS(parse_labels_jsonl(R"({"frame_id":"f","extra":1,"center":[0,0,0],"dims":[1,1,1],"yaw":0,"class":"vehicle","num_points":1})"),
                  FormatError);
  CHECK_THROWS_AS(parse_labels_jsonl("{not json"), FormatError);
}

TEST_CASE("frame manifest round trip resolves paths against its directory") {
  TempDir dir("io_manifest");
  FrameManifest m;
  m.sequence_id = "seq";
  m.frame_gap = 0.05;
  FrameEntry e;
  e.frame_id = "000";
  e.points = dir / "pts" / "000.bin";
  e.labels = dir / "labels.jsonl";
  e.timestamp = 1.5;
  e.pose = Pose::from_yaw(0.5, {1, 2, 3});
  m.frames.push_back(e);
  save_manifest(dir / "frames.json", m);
  const FrameManifest back = load_manifest(dir / "frames.json");
  REQUIRE(back.frames.size() == 1);
  CHECK(back.frame_gap == 0.05);
  CHECK(std::filesystem::weakly_canonical(back.frames[0].points) == std::filesystem::weakly_canonical(e.points));
  CHECK(back.frames[0].pose.translation.y == 2);
  CHECK(back.frames[0].pose.rotation[1] == doctest::Approx(e.pose.rotation[1]));
}

TEST_CASE("pose algebra") {
  const Pose a = Pose::from_yaw(0.7, {1, -2, 0.5});
  const Vec3 p{3, 4, 5};
  const Vec3 back = a.inverse().apply(a.apply(p));
  CHECK(back.x == doctest::Approx(3));
  CHECK(back.y == doctest::Approx(4));
  CHECK(back.z == doctest::Approx(5));
  const Pose b = Pose::from_yaw(-0.2, {0, 1, 0});
  const Vec3 q1 = a.compose(b).apply(p);
  const Vec3 q2 = a.apply(b.apply(p));
  CHECK(q1.x == doctest::Approx(q2.x));
  CHECK(q1.y == doctest::Approx(q2.y));
}
