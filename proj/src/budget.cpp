#include "griddet/budget.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"

namespace griddet {

int64_t linear_params(int cin, int cout) { return int64_t{cout} * cin + cout; }

int64_t conv_params(int cin, int cout, int k, int rank) {
  int64_t taps = 1;
  for (int a = 0; a < rank; ++a) taps *= k;
  return int64_t{cout} * cin * taps + cout;
}

int64_t dense_conv_flops(int cin, int cout, int k, int rank, int64_t out_sites) {
  int64_t taps = 1;
  for (int a = 0; a < rank; ++a) taps *= k;
  return 2 * int64_t{cin} * cout * taps * out_sites;
}

ParamCount count_params(const Model& model) {
  ParamCount pc;
  auto add = [&](const std::string& name, int64_t n) {
    pc.layers.emplace_back(name, n);
    pc.total += n;
  };
  for (size_t i = 0; i < model.encoder.mlp.size(); ++i) {
    add("encoder.mlp." + std::to_string(i), static_cast<int64_t>(model.encoder.mlp[i].num_params()));
  }
  for (size_t i = 0; i < model.encoder.cyl_mlp.size(); ++i) {
    add("encoder.cyl_mlp." + std::to_string(i), static_cast<int64_t>(model.encoder.cyl_mlp[i].num_params()));
  }
  for (const auto& l : model.encoder.fusion) add("encoder.fusion", static_cast<int64_t>(l.num_params()));
  for (const Layer& l : model.layers) {
    if (l.num_params() > 0) add(l.name, static_cast<int64_t>(l.num_params()));
  }
  return pc;
}

namespace {

FlopCount summarize(Profile p) {
  FlopCount fc;
  fc.layers = std::move(p);
  for (const auto& r : fc.layers) fc.total += r.flops;
  return fc;
}

}  // namespace

FlopCount count_flops(const Model& model, const PointCloud& cloud) {
  Profile p;
  forward(model, cloud, &p);
  return summarize(std::move(p));
}

FlopCount count_flops(const Model& model, const SparseTensor& input) {
  Profile p;
  const auto stages = backbone_forward(model, input, &p);
  const DenseTensor neck = neck_forward(model, stages, &p);
  head_forward(model, neck, &p);
  return summarize(std::move(p));
}

std::vector<RfEntry> receptive_field(const Model& model) {
  std::vector<RfEntry> out(model.layers.size());
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    RfEntry& e = out[i];
    e.name = l.name;
    if (l.inputs.empty()) continue;
    const RfEntry& src = out[static_cast<size_t>(l.inputs[0])];
    e.rf = src.rf;
    e.jump = src.jump;
    for (int in : l.inputs) e.rf = std::max(e.rf, out[static_cast<size_t>(in)].rf);
    switch (l.op) {
      case OpKind::kSubmConv:
      case OpKind::kSparseConv:
      case OpKind::kConv:
        e.rf += static_cast<int64_t>(std::llround((l.conv.k - 1) * l.conv.dilation * src.jump));
        e.jump = src.jump * l.conv.stride;
        break;
      case OpKind::kMaxPool:
        e.rf += static_cast<int64_t>(std::llround(2 * src.jump));
        e.jump = src.jump * 2;
        break;
      case OpKind::kTransposedConv:
      case OpKind::kUpsample:
        e.jump = src.jump / 2;
        break;
      default:
        break;
    }
  }
  return out;
}

int64_t neck_receptive_field(const Model& model) {
  return receptive_field(model)[static_cast<size_t>(model.neck_node)].rf;
}

bool bitwise_equal(const HeadOutput& a, const HeadOutput& b) {
  auto same = [](const DenseTensor& x, const DenseTensor& y) {
    return x.channels == y.channels && x.dims == y.dims && x.values.size() == y.values.size() &&
           std::memcmp(x.values.data(), y.values.data(), x.values.size() * sizeof(float)) == 0;
  };
  auto same_opt = [&](const std::optional<DenseTensor>& x, const std::optional<DenseTensor>& y) {
    return x.has_value() == y.has_value() && (!x || same(*x, *y));
  };
  if (a.groups.size() != b.groups.size()) return false;
  for (size_t g = 0; g < a.groups.size(); ++g) {
    const auto& p = a.groups[g];
    const auto& q = b.groups[g];
    if (p.classes != q.classes || !same(p.heatmap, q.heatmap) || !same(p.offset, q.offset) || !same(p.z, q.z) ||
        !same(p.dims, q.dims) || !same(p.yaw, q.yaw) || !same_opt(p.iou, q.iou) || !same_opt(p.velocity, q.velocity)) {
      return false;
    }
  }
  return true;
}

BenchResult benchmark(const Model& model, const PointCloud& cloud, int warmup, int iters) {
  if (warmup < 0 || iters < 1) throw ConfigError("benchmark: warmup must be >= 0 and iters >= 1");
  for (int i = 0; i < warmup; ++i) forward(model, cloud);
  BenchResult r;
  HeadOutput first;
  HeadOutput last;
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    HeadOutput out = forward(model, cloud);
    const auto t1 = std::chrono::steady_clock::now();
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (i == 0) first = std::move(out);
    else if (i == iters - 1) last = std::move(out);
  }
  r.deterministic = iters == 1 || bitwise_equal(first, last);
  std::vector<double> sorted = r.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  r.mean_ms = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  const size_t n = sorted.size();
  r.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  // Nearest-rank percentile.
  const auto rank = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(n)));
  r.p95_ms = sorted[std::max<size_t>(rank, 1) - 1];
  return r;
}

const char* tier_name(Tier t) {
  switch (t) {
    case Tier::kT: return "T";
    case Tier::kS: return "S";
    case Tier::kB: return "B";
    case Tier::kL: return "L";
  }
  return "?";
}

Tier parse_tier(const std::string& s) {
  for (auto t : {Tier::kT, Tier::kS, Tier::kB, Tier::kL}) {
    if (s == tier_name(t)) return t;
  }
  throw ConfigError("unknown tier '" + s + "'");
}

std::vector<ScalePreset> scaling_series(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kPillar:
      return {{Tier::kT, {32, 64, 128, 128}},
              {Tier::kS, {42, 84, 168, 168}},
              {Tier::kB, {64, 128, 256, 256}},
              {Tier::kL, {96, 192, 384, 384}}};
    case EncoderKind::kVoxel:
      return {{Tier::kS, {12, 24, 48, 96}}, {Tier::kB, {18, 36, 72, 144}}, {Tier::kL, {28, 56, 112, 224}}};
    case EncoderKind::kMvf:
      return {{Tier::kT, {32, 64, 128, 128}},
              {Tier::kS, {44, 88, 176, 176}},
              {Tier::kB, {68, 136, 272, 272}},
              {Tier::kL, {96, 192, 384, 384}}};
  }
  return {};
}

ModelConfig preset_config(EncoderKind kind, Tier tier) {
  const auto series = scaling_series(kind);
  const auto it = std::find_if(series.begin(), series.end(), [&](const ScalePreset& p) { return p.tier == tier; });
  if (it == series.end()) {
    throw ConfigError(std::string("no ") + encoder_name(kind) + " preset for tier " + tier_name(tier));
  }
  ModelConfig c;
  c.name = std::string(encoder_name(kind)) + "-" + tier_name(tier);
  c.encoder.kind = kind;
  c.encoder.mlp_channels = {it->channels[0]};
  switch (kind) {
    case EncoderKind::kPillar: c.grid = GridSpec::default_pillar(); break;
    case EncoderKind::kVoxel: c.grid = GridSpec::default_voxel(); break;
    case EncoderKind::kMvf:
      c.grid = GridSpec::default_pillar();
      c.cylindrical_grid = GridSpec::default_cylindrical();
      break;
  }
  c.backbone_channels = it->channels;
  c.neck.kind = NeckKind::kAspp;
  c.neck.channels = it->channels[3];
  c.head.channels = it->channels[0];
  c.head.upsample = 2;
  return c;
}

ModelConfig preset_config(const std::string& name) {
  const auto dash = name.rfind('-');
  if (dash == std::string::npos) throw ConfigError("preset name must look like 'pillar-T', got '" + name + "'");
  EncoderKind kind;
  try {
    kind = parse_encoder(name.substr(0, dash));
  } catch (const Error&) {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return preset_config(kind, parse_tier(name.substr(dash + 1)));
}

ProfileReport profile_model(const Model& model, const PointCloud& cloud, HeadOutput* output) {
  ProfileReport r;
  r.model_name = model.config.name;
  r.channels = model.config.backbone_channels;
  r.num_points = static_cast<int64_t>(cloud.size());
  Profile p;
  const auto t0 = std::chrono::steady_clock::now();
  HeadOutput head = forward(model, cloud, &p);
  const auto t1 = std::chrono::steady_clock::now();
  r.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  const auto rf = receptive_field(model);
  std::unordered_map<std::string, int64_t> rf_by_name;
  for (const auto& e : rf) rf_by_name[e.name] = e.rf;
  for (const auto& rec : p) {
    LayerStats s;
    s.name = rec.name;
    s.op = rec.name.rfind("encoder.", 0) == 0 ? "linear" : op_name(rec.op);
    s.params = rec.params;
    s.flops = rec.flops;
    s.active_in = rec.active_in;
    s.active_out = rec.active_out;
    const auto it = rf_by_name.find(rec.name);
    s.receptive_field = it == rf_by_name.end() ? 1 : it->second;
    r.total_params += s.params;
    r.total_flops += s.flops;
    r.layers.push_back(std::move(s));
  }
  if (output) *output = std::move(head);
  return r;
}

nlohmann::json profile_json(const ProfileReport& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["model"] = r.model_name;
  j["channels"] = r.channels;
  j["num_points"] = r.num_points;
  auto layers = nlohmann::json::object();
  auto order = nlohmann::json::array();
  for (const auto& s : r.layers) {
    layers[s.name] = {{"op", s.op},
                      {"params", s.params},
                      {"flops", s.flops},
                      {"active_in", s.active_in},
                      {"active_out", s.active_out},
                      {"receptive_field", s.receptive_field}};
    order.push_back(s.name);
  }
  j["layers"] = layers;
  j["layer_order"] = order;
  j["totals"] = {{"params", r.total_params}, {"flops", r.total_flops}};
  if (r.latency_ms) j["totals"]["latency_ms"] = *r.latency_ms;
  return j;
}

std::string profile_table(const ProfileReport& r, bool per_layer) {
  std::ostringstream os;
  std::ostringstream ch;
  ch << '[' << r.channels[0] << ", " << r.channels[1] << ", " << r.channels[2] << ", " << r.channels[3] << ']';
  os << std::left << std::setw(14) << "Model" << std::setw(24) << "Channels" << std::right << std::setw(14)
     << "#Params (M)" << std::setw(12) << "FLOPs (G)" << std::setw(14) << "Latency (ms)" << '\n';
  os << std::left << std::setw(14) << r.model_name << std::setw(24) << ch.str() << std::right << std::fixed
     << std::setprecision(2) << std::setw(14) << r.total_params / 1e6 << std::setw(12) << r.total_flops / 1e9
     << std::setw(14);
  if (r.latency_ms) os << *r.latency_ms;
  else os << "-";
  os << '\n';
  if (per_layer) {
    size_t w = 5;
    for (const auto& s : r.layers) w = std::max(w, s.name.size());
    os << '\n'
       << std::left << std::setw(static_cast<int>(w + 2)) << "layer" << std::setw(16) << "op" << std::right
       << std::setw(12) << "params" << std::setw(18) << "flops" << std::setw(12) << "active_in" << std::setw(12)
       << "active_out" << std::setw(8) << "rf" << '\n';
    for (const auto& s : r.layers) {
      os << std::left << std::setw(static_cast<int>(w + 2)) << s.name << std::setw(16) << s.op << std::right
         << std::setw(12) << s.params << std::setw(18) << s.flops << std::setw(12) << s.active_in << std::setw(12)
         << s.active_out << std::setw(8) << s.receptive_field << '\n';
    }
  }
  return os.str();
}

}  // namespace griddet
