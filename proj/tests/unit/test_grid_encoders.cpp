#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include "griddet/error.hpp"
#include "griddet/grid_encoders.hpp"
#include "support.hpp"

using namespace griddet;
using griddet::testing::random_cloud;

namespace {

Linear random_linear(std::mt19937_64& rng, int cin, int cout) {
  std::normal_distribution<float> n(0.f, 0.5f);
  Linear l{cin, cout, std::vector<float>(static_cast<size_t>(cin) * cout), std::vector<float>(cout)};
  for (auto& w : l.weight) w = n(rng);
  for (auto& b : l.bias) b = 0.1f * n(rng);
  return l;
}

EncoderWeights random_weights(std::mt19937_64& rng, const EncoderConfig& cfg, const GridSpec& spec,
                              const GridSpec* cyl = nullptr) {
  EncoderWeights w;
  int c = cfg.decorated_dims(spec);
  for (int o : cfg.mlp_channels) {
    w.mlp.push_back(random_linear(rng, c, o));
    c = o;
  }
  if (cyl) {
    int cc = cfg.decorated_dims(*cyl);
    for (int o : cfg.mlp_channels) {
      w.cyl_mlp.push_back(random_linear(rng, cc, o));
      cc = o;
    }
    w.fusion.push_back(random_linear(rng, cfg.decorated_dims(spec) + 2 * cfg.out_channels(), cfg.out_channels()));
  }
  return w;
}

PointCloud one_point(float x, float y, float z) {
  PointCloud c;
  c.points.push_back({x, y, z, 0.5f, 0.f});
  return c;
}

// Brute-force occupancy: distinct cells from direct floor arithmetic.
std::set<Coord> occupied(const PointCloud& cloud, const GridSpec& spec) {
  std::set<Coord> out;
  for (const auto& p : cloud.points) {
    const auto v = spec.view_coords(p.x, p.y, p.z);
    Coord c{0, 0, 0};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const Axis& ax = spec.axes[a];
      if (!(v[a] >= static_cast<float>(ax.min) && v[a] < static_cast<float>(ax.max))) inside = false;
    }
    if (!inside) continue;
    c[2] = std::clamp(static_cast<int32_t>(std::floor((v[0] - spec.axes[0].min) / spec.axes[0].cell)), 0,
                      spec.axes[0].dims() - 1);
    c[1] = std::clamp(static_cast<int32_t>(std::floor((v[1] - spec.axes[1].min) / spec.axes[1].cell)), 0,
                      spec.axes[1].dims() - 1);
    if (spec.rank() == 3) {
      c[0] = std::clamp(static_cast<int32_t>(std::floor((v[2] - spec.axes[2].min) / spec.axes[2].cell)), 0,
                        spec.axes[2].dims() - 1);
    }
    out.insert(c);
  }
  return out;
}

void check_same(const SparseTensor& a, const SparseTensor& b) {
  REQUIRE(a.coords == b.coords);
  REQUIRE(a.channels == b.channels);
  REQUIRE(a.features == b.features);
}

}  // namespace

TEST_CASE("assign_cells floor arithmetic") {
  const auto spec = GridSpec::default_pillar();
  CHECK(spec.axes[0].dims() == 2048);
  CHECK(spec.axes[1].dims() == 2048);
  const auto c = spec.cell_of(0.0, 0.0, 0.0);
  REQUIRE(c);
  CHECK((*c)[2] == 1024);
  CHECK((*c)[1] == 1024);

  PointCloud cloud;
  cloud.points = {{0.f, 0.f, 0.f, 0.f, 0.f}, {76.8f, 0.f, 0.f, 0.f, 0.f}, {0.f, 0.f, 4.f, 0.f, 0.f},
                  {-76.8f, -76.8f, -2.f, 0.f, 0.f}};
  const auto ids = assign_cells(cloud, spec);
  CHECK(ids[0] == spec.linear_index({0, 1024, 1024}));
  CHECK(ids[1] == kOutside);
  CHECK(ids[2] == kOutside);
  CHECK(ids[3] == 0);
}

TEST_CASE("cylindrical grid is 200 yaw by 30 z") {
  const auto cyl = GridSpec::default_cylindrical();
  const auto d = cyl.spatial_dims();
  CHECK(d[2] == 200);
  CHECK(d[1] == 30);
  CHECK(d[0] == 1);
  // Yaw comes from atan2(y, x).
  const auto c = cyl.cell_of(0.0, 10.0, 0.0);
  REQUIRE(c);
  CHECK((*c)[2] == 150);
  CHECK((*c)[1] == 10);
  // The negative x-axis folds into the first yaw bin.
  const auto back = cyl.cell_of(-10.0, 0.0, 0.0);
  REQUIRE(back);
  CHECK((*back)[2] == 0);
}

TEST_CASE("decorate_points centroid offsets") {
  const auto spec = GridSpec::pillar(0.0, 4.0, -2.0, 4.0, 1.0);
  EncoderConfig cfg;
  SUBCASE("single point has zero centroid offset") {
    const auto cloud = one_point(0.3f, 0.6f, 1.0f);
    const auto cells = assign_cells(cloud, spec);
    const auto f = decorate_points(cloud, cells, spec, cfg);
    REQUIRE(f.cols == 10);
    CHECK(f.row(0)[5] == 0.f);
    CHECK(f.row(0)[6] == 0.f);
    CHECK(f.row(0)[7] == 0.f);
    CHECK(f.row(0)[8] == doctest::Approx(0.3 - 0.5).epsilon(1e-6));
    CHECK(f.row(0)[9] == doctest::Approx(0.6 - 0.5).epsilon(1e-6));
  }
  SUBCASE("symmetric pair negates") {
    PointCloud cloud;
    cloud.points = {{0.25f, 0.5f, 1.0f, 0.f, 0.f}, {0.75f, 0.5f, 3.0f, 0.f, 0.f}};
    const auto f = decorate_points(cloud, assign_cells(cloud, spec), spec, cfg);
    for (int c = 5; c < 8; ++c) CHECK(f.row(0)[c] == -f.row(1)[c]);
    CHECK(f.row(0)[5] == doctest::Approx(-0.25));
    CHECK(f.row(0)[7] == doctest::Approx(-1.0));
  }
  SUBCASE("random 50-point pillar sums to zero") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(1.0, 2.0), z(-2.0, 4.0);
    PointCloud cloud;
    for (int i = 0; i < 50; ++i) {
      cloud.points.push_back({static_cast<float>(u(rng)), static_cast<float>(u(rng)),
                              static_cast<float>(z(rng)), 0.f, 0.f});
    }
    const auto cells = assign_cells(cloud, spec);
    REQUIRE(std::all_of(cells.begin(), cells.end(), [&](int64_t c) { return c == cells[0]; }));
    const auto f = decorate_points(cloud, cells, spec, cfg);
    // Brute-force centroid.
    double mean[3] = {0, 0, 0};
    for (const auto& p : cloud.points) {
      mean[0] += p.x / 50.0;
      mean[1] += p.y / 50.0;
      mean[2] += p.z / 50.0;
    }
    double sum[3] = {0, 0, 0};
    for (size_t i = 0; i < 50; ++i) {
      for (int a = 0; a < 3; ++a) sum[a] += f.row(i)[5 + a];
      CHECK(f.row(i)[5] == doctest::Approx(cloud.points[i].x - mean[0]).epsilon(1e-5));
    }
    for (double s : sum) CHECK(std::abs(s) < 1e-5);
  }
  SUBCASE("voxel adds a z center offset") {
    const auto vs = GridSpec::voxel(0.0, 4.0, -2.0, 4.0, 1.0, 0.5);
    const auto cloud = one_point(0.3f, 0.6f, 0.1f);
    const auto f = decorate_points(cloud, assign_cells(cloud, vs), vs, cfg);
    REQUIRE(f.cols == 11);
    CHECK(f.row(0)[10] == doctest::Approx(0.1 - 0.25).epsilon(1e-6));
  }
}

TEST_CASE("scatter_max per-channel max") {
  FeatureMatrix f(2, 2);
  f.data = {1, 5, 3, 2};
  const std::vector<int64_t> ids{0, 0};
  const auto r = scatter_max(f, ids);
  REQUIRE(r.cells == std::vector<int64_t>{0});
  CHECK(r.features.data == std::vector<float>{3, 5});

  SUBCASE("one point per cell is a gather") {
    FeatureMatrix g(3, 2);
    g.data = {1, 2, 3, 4, 5, 6};
    const std::vector<int64_t> c{7, 2, 9};
    const auto s = scatter_max(g, c);
    CHECK(s.cells == std::vector<int64_t>{2, 7, 9});
    CHECK(s.features.data == std::vector<float>{3, 4, 1, 2, 5, 6});
    const auto back = gather_rows(s, 3);
    CHECK(back.data == g.data);
  }
}

TEST_CASE("scatter_max matches brute-force grouping") {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> n;
  std::uniform_int_distribution<int> cell(-1, 63);
  FeatureMatrix f(1000, 5);
  for (auto& v : f.data) v = n(rng);
  std::vector<int64_t> ids(1000);
  for (auto& id : ids) id = cell(rng);
  for (auto& id : ids) id = id < 0 ? kOutside : id;

  std::map<int64_t, std::vector<float>> oracle;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kOutside) continue;
    auto [it, fresh] = oracle.try_emplace(ids[i], f.row(i).begin(), f.row(i).end());
    if (!fresh) {
      for (int c = 0; c < 5; ++c) it->second[c] = std::max(it->second[c], f.row(i)[c]);
    }
  }
  const auto r = scatter_max(f, ids);
  REQUIRE(r.cells.size() == oracle.size());
  size_t k = 0;
  for (const auto& [cell_id, row] : oracle) {
    CHECK(r.cells[k] == cell_id);
    CHECK(std::equal(row.begin(), row.end(), r.features.row(k).begin()));
    ++k;
  }
}

TEST_CASE("scatter_max is monotone in added points") {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n;
  FeatureMatrix f(40, 3);
  for (auto& v : f.data) v = n(rng);
  std::vector<int64_t> ids(40);
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int64_t>(i % 7);
  const auto base = scatter_max(f, ids);

  FeatureMatrix g(41, 3);
  std::copy(f.data.begin(), f.data.end(), g.data.begin());
  g.data[120] = n(rng);
  g.data[121] = n(rng);
  g.data[122] = n(rng);
  ids.push_back(3);
  const auto more = scatter_max(g, ids);
  REQUIRE(more.cells == base.cells);
  for (size_t i = 0; i < base.features.data.size(); ++i) CHECK(more.features.data[i] >= base.features.data[i]);
}

TEST_CASE("pillar_encode") {
  const auto spec = GridSpec::pillar(-8.0, 8.0, -2.0, 4.0, 0.5);
  EncoderConfig cfg;
  cfg.mlp_channels = {10};

  SUBCASE("identity MLP on one point") {
    EncoderWeights w;
    Linear id{10, 10, std::vector<float>(100, 0.f), std::vector<float>(10, 0.f)};
    for (int i = 0; i < 10; ++i) id.weight[static_cast<size_t>(i) * 10 + i] = 1.f;
    w.mlp.push_back(id);
    const auto cloud = one_point(-1.2f, 3.3f, -0.4f);
    const auto st = pillar_encode(cloud, spec, cfg, w);
    REQUIRE(st.size() == 1);
    CHECK(st.coords[0] == *spec.cell_of(-1.2f, 3.3f, -0.4f));
    const auto dec = decorate_points(cloud, assign_cells(cloud, spec), spec, cfg);
    for (int c = 0; c < 10; ++c) CHECK(st.row(0)[c] == std::max(0.f, dec.row(0)[c]));
  }
  SUBCASE("empty cloud") {
    std::mt19937_64 rng(1);
    const auto st = pillar_encode(PointCloud{}, spec, cfg, random_weights(rng, cfg, spec));
    CHECK(st.empty());
    CHECK(st.channels == 10);
  }
  SUBCASE("active count equals occupied pillars") {
    std::mt19937_64 rng(2);
    const auto cloud = random_cloud(rng, 200, -9.0, 9.0);
    const auto st = pillar_encode(cloud, spec, cfg, random_weights(rng, cfg, spec));
    const auto occ = occupied(cloud, spec);
    REQUIRE(st.size() == occ.size());
    CHECK(std::equal(occ.begin(), occ.end(), st.coords.begin()));
    st.validate();
  }
  SUBCASE("rejects a voxel grid") {
    std::mt19937_64 rng(1);
    const auto vs = GridSpec::voxel(-8.0, 8.0, -2.0, 4.0, 0.5, 0.5);
    CHECK_THROWS_AS(pillar_encode(PointCloud{}, vs, cfg, random_weights(rng, cfg, spec)), ConfigError);
  }
}

TEST_CASE("voxel_encode") {
  const auto spec = GridSpec::voxel(-8.0, 8.0, -2.0, 4.0, 0.5, 0.5);
  EncoderConfig cfg;
  cfg.mlp_channels = {11};
  SUBCASE("identity MLP on one point") {
    EncoderWeights w;
    Linear id{11, 11, std::vector<float>(121, 0.f), std::vector<float>(11, 0.f)};
    for (int i = 0; i < 11; ++i) id.weight[static_cast<size_t>(i) * 11 + i] = 1.f;
    w.mlp.push_back(id);
    const auto cloud = one_point(2.2f, -0.3f, 1.1f);
    const auto st = voxel_encode(cloud, spec, cfg, w);
    REQUIRE(st.size() == 1);
    CHECK(st.rank == 3);
    CHECK(st.coords[0] == Coord{6, 15, 20});
    const auto dec = decorate_points(cloud, assign_cells(cloud, spec), spec, cfg);
    for (int c = 0; c < 11; ++c) CHECK(st.row(0)[c] == std::max(0.f, dec.row(0)[c]));
  }
  SUBCASE("empty cloud") {
    std::mt19937_64 rng(1);
    CHECK(voxel_encode(PointCloud{}, spec, cfg, random_weights(rng, cfg, spec)).empty());
  }
  SUBCASE("active count equals occupied voxels") {
    std::mt19937_64 rng(3);
    const auto cloud = random_cloud(rng, 200, -9.0, 9.0);
    const auto st = voxel_encode(cloud, spec, cfg, random_weights(rng, cfg, spec));
    const auto occ = occupied(cloud, spec);
    REQUIRE(st.size() == occ.size());
    CHECK(std::equal(occ.begin(), occ.end(), st.coords.begin()));
  }
}

TEST_CASE("mvf_encode") {
  const auto spec = GridSpec::pillar(-8.0, 8.0, -2.0, 4.0, 0.5);
  const auto cyl = GridSpec::cylindrical(8.0 * std::numbers::sqrt2, -2.0, 4.0, 1.8 * std::numbers::pi / 180.0, 0.2);
  EncoderConfig cfg;
  cfg.kind = EncoderKind::kMvf;
  cfg.mlp_channels = {8};
  std::mt19937_64 rng(4);
  const auto w = random_weights(rng, cfg, spec, &cyl);

  SUBCASE("singleton pools gather the point's own feature") {
    const auto cloud = one_point(3.1f, 1.7f, 0.2f);
    MvfTrace trace;
    const auto st = mvf_encode(cloud, spec, cyl, cfg, w, &trace);
    REQUIRE(st.size() == 1);
    const auto pd = decorate_points(cloud, assign_cells(cloud, spec), spec, cfg);
    const auto cd = decorate_points(cloud, assign_cells(cloud, cyl), cyl, cfg);
    CHECK(trace.pillar_gathered.data == mlp_forward(pd, w.mlp).data);
    CHECK(trace.cyl_gathered.data == mlp_forward(cd, w.cyl_mlp).data);
  }
  SUBCASE("active set matches pillar_encode") {
    const auto cloud = random_cloud(rng, 200, -9.0, 9.0);
    const auto a = mvf_encode(cloud, spec, cyl, cfg, w);
    const auto b = pillar_encode(cloud, spec, cfg, w);
    CHECK(a.coords == b.coords);
  }
  SUBCASE("gathered cylindrical feature equals brute-force pool") {
    const auto cloud = random_cloud(rng, 200, -9.0, 9.0);
    MvfTrace trace;
    mvf_encode(cloud, spec, cyl, cfg, w, &trace);
    const auto pcells = assign_cells(cloud, spec);
    auto ccells = assign_cells(cloud, cyl);
    for (size_t i = 0; i < cloud.size(); ++i) {
      if (pcells[i] == kOutside) ccells[i] = kOutside;
    }
    const auto emb = mlp_forward(decorate_points(cloud, ccells, cyl, cfg), w.cyl_mlp);
    for (size_t i = 0; i < cloud.size(); ++i) {
      if (pcells[i] == kOutside) continue;
      std::vector<float> pool(8, -INFINITY);
      for (size_t j = 0; j < cloud.size(); ++j) {
        if (ccells[j] != ccells[i]) continue;
        for (int c = 0; c < 8; ++c) pool[c] = std::max(pool[c], emb.row(j)[c]);
      }
      CHECK(std::equal(pool.begin(), pool.end(), trace.cyl_gathered.row(i).begin()));
    }
  }
}

TEST_CASE("encoders are invariant to point order") {
  std::mt19937_64 rng(9);
  const auto spec = GridSpec::pillar(-8.0, 8.0, -2.0, 4.0, 0.5);
  const auto vspec = GridSpec::voxel(-8.0, 8.0, -2.0, 4.0, 0.5, 0.5);
  const auto cyl = GridSpec::cylindrical(8.0 * std::numbers::sqrt2, -2.0, 4.0, 1.8 * std::numbers::pi / 180.0, 0.2);
  EncoderConfig cfg;
  cfg.mlp_channels = {6, 8};
  const auto pw = random_weights(rng, cfg, spec, &cyl);
  const auto vw = random_weights(rng, cfg, vspec);
  const auto cloud = random_cloud(rng, 500, -9.0, 9.0);
  auto shuffled = cloud;
  std::shuffle(shuffled.points.begin(), shuffled.points.end(), rng);

  check_same(pillar_encode(cloud, spec, cfg, pw), pillar_encode(shuffled, spec, cfg, pw));
  check_same(voxel_encode(cloud, vspec, cfg, vw), voxel_encode(shuffled, vspec, cfg, vw));
  check_same(mvf_encode(cloud, spec, cyl, cfg, pw), mvf_encode(shuffled, spec, cyl, cfg, pw));
}

TEST_CASE("mismatched encoder weights are a config error") {
  const auto spec = GridSpec::pillar(-8.0, 8.0, -2.0, 4.0, 0.5);
  EncoderConfig cfg;
  cfg.mlp_channels = {4};
  EncoderWeights w;
  w.mlp.push_back(Linear{9, 4, std::vector<float>(36), std::vector<float>(4)});
  CHECK_THROWS_AS(pillar_encode(PointCloud{}, spec, cfg, w), ConfigError);
}
