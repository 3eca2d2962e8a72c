#include "griddet/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"
#include "griddet/json_util.hpp"
#include "griddet/rng.hpp"

namespace griddet {

namespace {

// ---------------------------------------------------------------------------
// Config helpers

std::string stage_name(int s) { return "backbone.stage" + std::to_string(s + 1); }

int neck_output_level(const NeckConfig& n) {
  const auto levels = n.resolved_levels();
  switch (n.kind) {
    case NeckKind::kFpn:
    case NeckKind::kPillarnet:
      return levels.front();
    default:
      return levels.back();
  }
}

Coord strided_dims(const Coord& d, int rank) {
  return {rank == 3 ? conv_out_dim(d[0], 3, 2, 1) : d[0], conv_out_dim(d[1], 3, 2, 1),
          conv_out_dim(d[2], 3, 2, 1)};
}

// ---------------------------------------------------------------------------
// Graph construction

class GraphBuilder {
 public:
  explicit GraphBuilder(Model& m) : m_(m) {}

  int input(int channels, Coord dims, int rank) {
    Layer l;
    l.name = "input";
    l.op = OpKind::kInput;
    l.channels = channels;
    l.dims = dims;
    l.rank = rank;
    l.sparse = true;
    return push(std::move(l));
  }

  int conv(Section sec, const std::string& name, int in, int cout, int k, int stride = 1,
           int dilation = 1) {
    const Layer& src = node(in);
    Layer l;
    l.name = name;
    l.section = sec;
    l.inputs = {in};
    l.channels = cout;
    l.rank = src.rank;
    l.sparse = src.sparse;
    if (src.sparse) {
      l.op = stride == 2 ? OpKind::kSparseConv : OpKind::kSubmConv;
    } else {
      l.op = OpKind::kConv;
      if (src.rank != 2 && sec != Section::kBackbone) throw ConfigError(name + ": dense convs are rank 2");
    }
    l.conv = ConvWeights::zeros(src.rank, cout, src.channels, k, stride, dilation);
    l.dims = stride == 2 ? strided_dims(src.dims, src.rank) : src.dims;
    l.stride = src.stride * stride;
    init_conv(l, src.channels * l.conv.taps());
    return push(std::move(l));
  }

  int transposed(Section sec, const std::string& name, int in, int cout, Coord target) {
    const Layer& src = node(in);
    if (src.sparse || src.rank != 2) throw ConfigError(name + ": transposed conv needs a dense 2D input");
    Layer l;
    l.name = name;
    l.section = sec;
    l.op = OpKind::kTransposedConv;
    l.inputs = {in};
    l.channels = cout;
    l.rank = 2;
    l.dims = target;
    l.stride = std::max(1, src.stride / 2);
    l.conv.rank = 2;
    l.conv.cout = cout;
    l.conv.cin = src.channels;
    l.conv.k = 2;
    l.conv.stride = 2;
    l.conv.kernel.assign(static_cast<size_t>(cout) * src.channels * 4, 0.f);
    l.conv.bias.assign(static_cast<size_t>(cout), 0.f);
    init_conv(l, src.channels * 4);
    return push(std::move(l));
  }

  int affine(Section sec, const std::string& name, int in) {
    Layer l = unary(sec, name, OpKind::kAffine, in);
    l.scale.assign(static_cast<size_t>(l.channels), 1.f);
    l.shift.assign(static_cast<size_t>(l.channels), 0.f);
    return push(std::move(l));
  }

  int relu(Section sec, const std::string& name, int in) { return push(unary(sec, name, OpKind::kRelu, in)); }

  int add(Section sec, const std::string& name, int a, int b) {
    const Layer& la = node(a);
    const Layer& lb = node(b);
    if (la.channels != lb.channels || la.dims != lb.dims || la.sparse != lb.sparse) {
      throw ConfigError(name + ": operands have inconsistent channels or shape");
    }
    Layer l = unary(sec, name, OpKind::kAdd, a);
    l.inputs = {a, b};
    return push(std::move(l));
  }

  int to_bev(Section sec, const std::string& name, int in) {
    const Layer& src = node(in);
    Layer l = unary(sec, name, OpKind::kToBev, in);
    l.sparse = false;
    l.rank = 2;
    l.channels = src.channels * (src.rank == 3 ? src.dims[0] : 1);
    l.dims = {1, src.dims[1], src.dims[2]};
    return push(std::move(l));
  }

  int upsample(Section sec, const std::string& name, int in, Coord target) {
    Layer l = unary(sec, name, OpKind::kUpsample, in);
    l.dims = target;
    l.stride = std::max(1, l.stride / 2);
    return push(std::move(l));
  }

  int max_pool(Section sec, const std::string& name, int in) {
    Layer l = unary(sec, name, OpKind::kMaxPool, in);
    l.dims = {1, conv_out_dim(l.dims[1], 3, 2, 1), conv_out_dim(l.dims[2], 3, 2, 1)};
    l.stride *= 2;
    return push(std::move(l));
  }

  int concat(Section sec, const std::string& name, const std::vector<int>& ins) {
    Layer l = unary(sec, name, OpKind::kConcat, ins.front());
    l.inputs = ins;
    l.channels = 0;
    for (int i : ins) {
      if (node(i).dims != l.dims || node(i).sparse) throw ConfigError(name + ": inputs have different shapes");
      l.channels += node(i).channels;
    }
    return push(std::move(l));
  }

  int fuse(Section sec, const std::string& name, const std::vector<int>& ins) {
    Layer l = unary(sec, name, OpKind::kFuse, ins.front());
    l.inputs = ins;
    for (int i : ins) {
      if (node(i).dims != l.dims || node(i).channels != l.channels) {
        throw ConfigError(name + ": fusion inputs have inconsistent channels or shape");
      }
    }
    l.fuse_logits.assign(ins.size(), 0.f);
    return push(std::move(l));
  }

  // conv -> affine -> (relu)
  int conv_block(Section sec, const std::string& name, int in, int cout, int k, int stride = 1,
                 int dilation = 1, bool with_relu = true) {
    int x = conv(sec, name, in, cout, k, stride, dilation);
    x = affine(sec, name + ".norm", x);
    return with_relu ? relu(sec, name + ".relu", x) : x;
  }

  // Two 3x3 convs with identity or projected skip.
  int basic_block(Section sec, const std::string& name, int in, int cout) {
    int x = conv_block(sec, name + ".conv1", in, cout, 3);
    x = conv_block(sec, name + ".conv2", x, cout, 3, 1, 1, false);
    int skip = in;
    if (node(in).channels != cout) skip = conv_block(sec, name + ".proj", in, cout, 1, 1, 1, false);
    x = add(sec, name + ".add", x, skip);
    return relu(sec, name + ".relu", x);
  }

  const Layer& node(int i) const { return m_.layers.at(static_cast<size_t>(i)); }
  Layer& node_mut(int i) { return m_.layers.at(static_cast<size_t>(i)); }

 private:
  Layer unary(Section sec, const std::string& name, OpKind op, int in) const {
    Layer l = node(in);
    l.name = name;
    l.op = op;
    l.section = sec;
    l.inputs = {in};
    l.conv = {};
    l.scale.clear();
    l.shift.clear();
    l.fuse_logits.clear();
    return l;
  }

  int push(Layer l) {
    for (const auto& e : m_.layers) {
      if (e.name == l.name) throw InvariantError("duplicate layer name " + l.name);
    }
    m_.layers.push_back(std::move(l));
    return static_cast<int>(m_.layers.size()) - 1;
  }

  void init_conv(Layer& l, int fan_in) const {
    const CounterRng rng(m_.config.seed, hash_name(l.name.c_str()));
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (size_t i = 0; i < l.conv.kernel.size(); ++i) {
      l.conv.kernel[i] = static_cast<float>(std_dev * rng.normal(i));
    }
  }

  Model& m_;
};

Linear make_linear(const std::string& name, int cin, int cout, uint64_t seed) {
  Linear l;
  l.cin = cin;
  l.cout = cout;
  l.weight.resize(static_cast<size_t>(cin) * cout);
  l.bias.assign(static_cast<size_t>(cout), 0.f);
  const CounterRng rng(seed, hash_name(name.c_str()));
  const double std_dev = std::sqrt(2.0 / cin);
  for (size_t i = 0; i < l.weight.size(); ++i) l.weight[i] = static_cast<float>(std_dev * rng.normal(i));
  return l;
}

std::vector<Linear> make_mlp(const std::string& prefix, int cin, const std::vector<int>& widths,
                             uint64_t seed) {
  std::vector<Linear> out;
  for (size_t i = 0; i < widths.size(); ++i) {
    out.push_back(make_linear(prefix + "." + std::to_string(i), cin, widths[i], seed));
    cin = widths[i];
  }
  return out;
}

void build_neck(GraphBuilder& b, Model& m) {
  const auto& cfg = m.config;
  const NeckConfig& neck = cfg.neck;
  const auto levels = neck.resolved_levels();
  const int n = neck.channels;
  constexpr Section kS = Section::kNeck;

  std::vector<int> bev;
  for (int lv : levels) {
    bev.push_back(b.to_bev(kS, "neck.bev" + std::to_string(lv), m.stage_nodes[static_cast<size_t>(lv - 1)]));
  }

  const std::string p = std::string("neck.") + neck_name(neck.kind);
  switch (neck.kind) {
    case NeckKind::kPlain:
      m.neck_node = b.basic_block(kS, p + ".block", bev.back(), n);
      break;
    case NeckKind::kDilated: {
      if (n < 4) throw ConfigError(p + ": channels must be >= 4 for bottleneck blocks");
      int x = b.conv_block(kS, p + ".lateral", bev.back(), n, 1, 1, 1, false);
      x = b.conv_block(kS, p + ".fpn", x, n, 3, 1, 1, false);
      const auto dil = neck.resolved_dilations();
      for (size_t i = 0; i < dil.size(); ++i) {
        const std::string bn = p + ".block" + std::to_string(i);
        int y = b.conv_block(kS, bn + ".conv1", x, n / 4, 1);
        y = b.conv_block(kS, bn + ".conv2", y, n / 4, 3, 1, dil[i]);
        y = b.conv_block(kS, bn + ".conv3", y, n, 1);
        x = b.add(kS, bn + ".add", y, x);
      }
      m.neck_node = x;
      break;
    }
    case NeckKind::kAspp: {
      std::vector<int> branches;
      branches.push_back(b.conv_block(kS, p + ".branch_1x1", bev.back(), n, 1));
      for (int d : neck.resolved_dilations()) {
        branches.push_back(b.conv_block(kS, p + ".branch_d" + std::to_string(d), bev.back(), n, 3, 1, d));
      }
      const int cat = b.concat(kS, p + ".concat", branches);
      m.neck_node = b.conv_block(kS, p + ".project", cat, n, 1);
      break;
    }
    case NeckKind::kFpn: {
      std::vector<int> lat;
      for (size_t i = 0; i < levels.size(); ++i) {
        lat.push_back(b.conv_block(kS, p + ".lateral" + std::to_string(levels[i]), bev[i], n, 1, 1, 1, false));
      }
      int top = lat.back();
      for (size_t i = levels.size() - 1; i-- > 0;) {
        const std::string lv = std::to_string(levels[i]);
        const int up = b.upsample(kS, p + ".up" + lv, top, b.node(lat[i]).dims);
        top = b.add(kS, p + ".merge" + lv, lat[i], up);
      }
      m.neck_node = b.conv_block(kS, p + ".output", top, n, 3);
      break;
    }
    case NeckKind::kBifpn: {
      const size_t k = levels.size();
      std::vector<int> lat;
      for (size_t i = 0; i < k; ++i) {
        lat.push_back(b.conv_block(kS, p + ".lateral" + std::to_string(levels[i]), bev[i], n, 1, 1, 1, false));
      }
      // Top-down intermediates, coarsest first.
      std::vector<int> td(k);
      td[k - 1] = lat[k - 1];
      for (size_t i = k - 1; i-- > 0;) {
        const std::string lv = std::to_string(levels[i]);
        const int up = b.upsample(kS, p + ".td_up" + lv, td[i + 1], b.node(lat[i]).dims);
        const int f = b.fuse(kS, p + ".td_fuse" + lv, {lat[i], up});
        td[i] = b.conv_block(kS, p + ".td_conv" + lv, f, n, 3);
      }
      // Bottom-up outputs, finest first.
      int prev = td[0];
      for (size_t i = 1; i < k; ++i) {
        const std::string lv = std::to_string(levels[i]);
        const int down = b.max_pool(kS, p + ".bu_down" + lv, prev);
        std::vector<int> ins{lat[i], down};
        if (i + 1 < k) ins.insert(ins.begin() + 1, td[i]);
        const int f = b.fuse(kS, p + ".bu_fuse" + lv, ins);
        prev = b.conv_block(kS, p + ".bu_conv" + lv, f, n, 3);
      }
      m.neck_node = prev;
      break;
    }
    case NeckKind::kPillarnet: {
      const int fine = bev[0];
      const int up = b.transposed(kS, p + ".up", bev[1], n, b.node(fine).dims);
      int upn = b.affine(kS, p + ".up.norm", up);
      upn = b.relu(kS, p + ".up.relu", upn);
      const int lat = b.conv_block(kS, p + ".lateral", fine, n, 3);
      const int cat = b.concat(kS, p + ".concat", {lat, upn});
      m.neck_node = b.conv_block(kS, p + ".fuse", cat, n, 3);
      break;
    }
  }
}

void build_head(GraphBuilder& b, Model& m) {
  const HeadConfig& h = m.config.head;
  constexpr Section kS = Section::kHead;
  int x = m.neck_node;
  if (h.upsample == 2) {
    const Coord d = b.node(x).dims;
    const int up = b.transposed(kS, "head.upsample", x, b.node(x).channels, {1, 2 * d[1], 2 * d[2]});
    x = b.relu(kS, "head.upsample.relu", b.affine(kS, "head.upsample.norm", up));
  }
  const double heat_bias = -std::log((1.0 - Model::kHeatmapPrior) / Model::kHeatmapPrior);
  for (size_t g = 0; g < h.groups.size(); ++g) {
    const std::string gp = "head.group" + std::to_string(g);
    const int shared = b.conv_block(kS, gp + ".shared", x, h.channels, 3);
    HeadNodes hn;
    hn.classes = h.groups[g];
    hn.heatmap = b.conv(kS, gp + ".heatmap", shared, static_cast<int>(h.groups[g].size()), 1);
    for (float& bias : b.node_mut(hn.heatmap).conv.bias) bias = static_cast<float>(heat_bias);
    hn.offset = b.conv(kS, gp + ".offset", shared, 2, 1);
    hn.z = b.conv(kS, gp + ".z", shared, 1, 1);
    hn.dims = b.conv(kS, gp + ".dims", shared, 3, 1);
    hn.yaw = b.conv(kS, gp + ".yaw", shared, 2, 1);
    if (h.iou_branch) hn.iou = b.conv(kS, gp + ".iou", shared, 1, 1);
    if (h.velocity) hn.velocity = b.conv(kS, gp + ".velocity", shared, 2, 1);
    m.heads.push_back(std::move(hn));
  }
}

void check_graph(const Model& m) {
  for (const Layer& l : m.layers) {
    for (int i : l.inputs) {
      if (i < 0 || static_cast<size_t>(i) >= m.layers.size() || &m.layers[static_cast<size_t>(i)] >= &l) {
        throw InvariantError(l.name + ": input is not an earlier layer");
      }
    }
    if (l.is_conv() && m.layers[static_cast<size_t>(l.inputs[0])].channels != l.conv.cin) {
      throw ConfigError(l.name + ": expects " + std::to_string(l.conv.cin) + " input channels, predecessor has " +
                        std::to_string(m.layers[static_cast<size_t>(l.inputs[0])].channels));
    }
  }
}

// ---------------------------------------------------------------------------
// Execution

using Value = std::variant<std::monostate, SparseTensor, DenseTensor>;

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

class Executor {
 public:
  Executor(const Model& m, Profile* profile) : m_(m), profile_(profile), values_(m.layers.size()) {
    last_use_.assign(m.layers.size(), -1);
    for (size_t i = 0; i < m.layers.size(); ++i) {
      for (int in : m.layers[i].inputs) last_use_[static_cast<size_t>(in)] = static_cast<int>(i);
    }
  }

  void set(int node, Value v) { values_[static_cast<size_t>(node)] = std::move(v); }

  template <typename T>
  const T& get(int node) const {
    const auto* v = std::get_if<T>(&values_[static_cast<size_t>(node)]);
    if (!v) throw InvariantError(m_.layers[static_cast<size_t>(node)].name + ": value not available");
    return *v;
  }

  template <typename T>
  T take(int node) {
    T out = get<T>(node);
    values_[static_cast<size_t>(node)] = std::monostate{};
    return out;
  }

  void run(Section section, const std::vector<int>& keep) {
    std::vector<bool> kept(m_.layers.size(), false);
    for (int k : keep) kept[static_cast<size_t>(k)] = true;
    for (size_t i = 0; i < m_.layers.size(); ++i) {
      const Layer& l = m_.layers[i];
      if (l.op == OpKind::kInput || l.section != section) continue;
      values_[i] = eval(l);
      for (int in : l.inputs) {
        const auto u = static_cast<size_t>(in);
        // Free once every consumer inside this section has run.
        if (!kept[u] && last_use_[u] <= static_cast<int>(i)) values_[u] = std::monostate{};
      }
    }
  }

 private:
  static int64_t active(const Value& v) {
    if (const auto* s = std::get_if<SparseTensor>(&v)) return static_cast<int64_t>(s->size());
    if (const auto* d = std::get_if<DenseTensor>(&v)) return d->plane();
    return 0;
  }

  Value eval(const Layer& l) {
    const Value& in0 = values_[static_cast<size_t>(l.inputs[0])];
    if (std::holds_alternative<std::monostate>(in0)) throw InvariantError(l.name + ": missing input");
    LayerRecord rec;
    rec.name = l.name;
    rec.op = l.op;
    rec.params = static_cast<int64_t>(l.num_params());
    rec.active_in = active(in0);
    Value out;
    switch (l.op) {
      case OpKind::kSubmConv:
      case OpKind::kSparseConv: {
        ConvStats st;
        const auto& x = std::get<SparseTensor>(in0);
        out = l.op == OpKind::kSubmConv ? submanifold_conv(x, l.conv, &st) : sparse_conv_strided(x, l.conv, &st);
        rec.flops = 2 * int64_t{l.conv.cin} * l.conv.cout * st.pairs;
        break;
      }
      case OpKind::kConv: {
        auto y = dense_conv(std::get<DenseTensor>(in0), l.conv);
        rec.flops = 2 * int64_t{l.conv.cin} * l.conv.cout * l.conv.taps() * y.plane();
        out = std::move(y);
        break;
      }
      case OpKind::kTransposedConv: {
        const auto& x = std::get<DenseTensor>(in0);
        auto y = transposed_conv2x(x, l.conv);
        rec.flops = 2 * int64_t{l.conv.cin} * l.conv.cout * 4 * x.plane();
        if (y.dims != l.dims) y = crop(y, l.dims);
        out = std::move(y);
        break;
      }
      case OpKind::kAffine: {
        out = in0;
        if (auto* s = std::get_if<SparseTensor>(&out)) {
          affine_inplace(s->features, s->channels, static_cast<int64_t>(s->size()), l.scale, l.shift, false);
        } else {
          auto& d = std::get<DenseTensor>(out);
          affine_inplace(d.values, d.channels, d.plane(), l.scale, l.shift, true);
        }
        break;
      }
      case OpKind::kRelu: {
        out = in0;
        if (auto* s = std::get_if<SparseTensor>(&out)) relu_inplace(s->features);
        else relu_inplace(std::get<DenseTensor>(out).values);
        break;
      }
      case OpKind::kAdd: {
        const Value& in1 = values_[static_cast<size_t>(l.inputs[1])];
        if (const auto* s = std::get_if<SparseTensor>(&in0)) out = add(*s, std::get<SparseTensor>(in1));
        else out = add(std::get<DenseTensor>(in0), std::get<DenseTensor>(in1));
        break;
      }
      case OpKind::kToBev: {
        const auto& s = std::get<SparseTensor>(in0);
        out = to_dense(s.rank == 3 ? collapse_height(s) : s);
        break;
      }
      case OpKind::kUpsample:
        out = upsample_nearest2x(std::get<DenseTensor>(in0), l.dims);
        break;
      case OpKind::kMaxPool:
        out = max_pool_down2(std::get<DenseTensor>(in0));
        break;
      case OpKind::kConcat:
      case OpKind::kFuse: {
        std::vector<const DenseTensor*> parts;
        for (int i : l.inputs) parts.push_back(&std::get<DenseTensor>(values_[static_cast<size_t>(i)]));
        if (l.op == OpKind::kConcat) {
          out = concat_channels(parts);
        } else {
          out = weighted_sum(parts, fusion_weights(l));
        }
        break;
      }
      case OpKind::kInput:
        break;
    }
    rec.active_out = active(out);
    if (profile_) profile_->push_back(std::move(rec));
    return out;
  }

  static DenseTensor crop(const DenseTensor& x, Coord dims) {
    DenseTensor out(x.channels, dims, x.rank, x.stride);
    for (int c = 0; c < x.channels; ++c) {
      for (int32_t r = 0; r < dims[1]; ++r) {
        for (int32_t q = 0; q < dims[2]; ++q) out.at(c, r, q) = x.at(c, r, q);
      }
    }
    return out;
  }

  const Model& m_;
  Profile* profile_;
  std::vector<Value> values_;
  std::vector<int> last_use_;
};

// ---------------------------------------------------------------------------
// Serialization helpers

nlohmann::json class_groups_json(const std::vector<std::vector<ObjectClass>>& groups) {
  auto j = nlohmann::json::array();
  for (const auto& g : groups) {
    auto gj = nlohmann::json::array();
    for (auto c : g) gj.push_back(class_name(c));
    j.push_back(gj);
  }
  return j;
}

struct TensorRef {
  std::string name;
  const float* data;
  size_t size;
  std::vector<int64_t> shape;
};

template <typename Fn>
void for_each_tensor(const Model& m, Fn&& fn) {
  auto linear = [&](const std::string& name, const Linear& l) {
    fn(name, "weight", l.weight, std::vector<int64_t>{l.cout, l.cin});
    fn(name, "bias", l.bias, std::vector<int64_t>{l.cout});
  };
  for (size_t i = 0; i < m.encoder.mlp.size(); ++i) linear("encoder.mlp." + std::to_string(i), m.encoder.mlp[i]);
  for (size_t i = 0; i < m.encoder.cyl_mlp.size(); ++i) {
    linear("encoder.cyl_mlp." + std::to_string(i), m.encoder.cyl_mlp[i]);
  }
  for (size_t i = 0; i < m.encoder.fusion.size(); ++i) linear("encoder.fusion", m.encoder.fusion[i]);
  for (const Layer& l : m.layers) {
    if (l.is_conv()) {
      std::vector<int64_t> shape{l.conv.cout, l.conv.cin};
      const int spatial = l.conv.rank;
      for (int a = 0; a < spatial; ++a) shape.push_back(l.conv.k);
      fn(l.name, "weight", l.conv.kernel, shape);
      fn(l.name, "bias", l.conv.bias, std::vector<int64_t>{l.conv.cout});
    } else if (l.op == OpKind::kAffine) {
      fn(l.name, "scale", l.scale, std::vector<int64_t>{static_cast<int64_t>(l.scale.size())});
      fn(l.name, "shift", l.shift, std::vector<int64_t>{static_cast<int64_t>(l.shift.size())});
    } else if (l.op == OpKind::kFuse) {
      fn(l.name, "logits", l.fuse_logits, std::vector<int64_t>{static_cast<int64_t>(l.fuse_logits.size())});
    }
  }
}

std::vector<uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

const char* neck_name(NeckKind k) {
  switch (k) {
    case NeckKind::kPlain: return "plain";
    case NeckKind::kDilated: return "dilated";
    case NeckKind::kAspp: return "aspp";
    case NeckKind::kFpn: return "fpn";
    case NeckKind::kBifpn: return "bifpn";
    case NeckKind::kPillarnet: return "pillarnet";
  }
  return "?";
}

NeckKind parse_neck(const std::string& s) {
  for (auto k : {NeckKind::kPlain, NeckKind::kDilated, NeckKind::kAspp, NeckKind::kFpn, NeckKind::kBifpn,
                 NeckKind::kPillarnet}) {
    if (s == neck_name(k)) return k;
  }
  throw ConfigError("unknown neck kind '" + s + "'");
}

std::vector<int> NeckConfig::resolved_levels() const {
  if (!levels.empty()) return levels;
  switch (kind) {
    case NeckKind::kFpn:
    case NeckKind::kBifpn: return {2, 3, 4};
    case NeckKind::kPillarnet: return {3, 4};
    default: return {4};
  }
}

std::vector<int> NeckConfig::resolved_dilations() const {
  if (!dilations.empty()) return dilations;
  if (kind == NeckKind::kAspp) return {1, 6, 12, 18};
  if (kind == NeckKind::kDilated) return {2, 4, 6, 8};
  return {};
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kSubmConv: return "subm_conv";
    case OpKind::kSparseConv: return "sparse_conv";
    case OpKind::kConv: return "conv";
    case OpKind::kTransposedConv: return "transposed_conv";
    case OpKind::kAffine: return "affine";
    case OpKind::kRelu: return "relu";
    case OpKind::kAdd: return "add";
    case OpKind::kToBev: return "to_bev";
    case OpKind::kUpsample: return "upsample";
    case OpKind::kMaxPool: return "max_pool";
    case OpKind::kConcat: return "concat";
    case OpKind::kFuse: return "fuse";
  }
  return "?";
}

std::vector<double> fusion_weights(const Layer& l) {
  std::vector<double> w;
  double total = 0.0;
  for (float v : l.fuse_logits) total += softplus(v);
  for (float v : l.fuse_logits) w.push_back(softplus(v) / total);
  return w;
}

size_t Layer::num_params() const {
  if (is_conv()) return conv.num_params();
  if (op == OpKind::kAffine) return scale.size() + shift.size();
  if (op == OpKind::kFuse) return fuse_logits.size();
  return 0;
}

int ModelConfig::backbone_downsample() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

int ModelConfig::neck_stride() const {
  const int level = neck_output_level(neck);
  int s = 1;
  for (int i = 0; i < level && i < 4; ++i) s *= backbone_strides[static_cast<size_t>(i)];
  return s;
}

double ModelConfig::output_cell() const {
  return grid.axes[0].cell * static_cast<double>(neck_stride()) / head.upsample;
}

void ModelConfig::validate() const {
  grid.validate();
  encoder.validate();
  const bool want3d = encoder.kind == EncoderKind::kVoxel;
  if (want3d != (grid.view == GridView::kCartesian3D)) {
    throw ConfigError("grid.view does not match encoder kind " + std::string(encoder_name(encoder.kind)));
  }
  if (encoder.kind != EncoderKind::kVoxel && grid.view != GridView::kCartesian2D) {
    throw ConfigError("pillar and mvf encoders need a cartesian2d grid");
  }
  if (encoder.kind == EncoderKind::kMvf) {
    if (!cylindrical_grid) throw ConfigError("mvf encoder needs cylindrical_grid");
    cylindrical_grid->validate();
    if (cylindrical_grid->view != GridView::kCylindrical) throw ConfigError("cylindrical_grid.view must be cylindrical");
  }
  for (size_t i = 0; i < 4; ++i) {
    if (backbone_channels[i] <= 0) throw ConfigError(stage_name(static_cast<int>(i)) + ": channels must be positive");
    if (backbone_strides[i] != 1 && backbone_strides[i] != 2) {
      throw ConfigError(stage_name(static_cast<int>(i)) + ": stride must be 1 or 2");
    }
  }
  if (neck.channels <= 0) throw ConfigError("neck: channels must be positive");
  const auto levels = neck.resolved_levels();
  const std::string np = std::string("neck.") + neck_name(neck.kind);
  for (int lv : levels) {
    if (lv < 1 || lv > 4) throw ConfigError(np + ": level " + std::to_string(lv) + " is not a backbone stage");
  }
  const bool multi = neck.kind == NeckKind::kFpn || neck.kind == NeckKind::kBifpn || neck.kind == NeckKind::kPillarnet;
  if (multi) {
    if (levels.size() < 2) throw ConfigError(np + ": needs at least two backbone stages");
    if (neck.kind == NeckKind::kPillarnet && levels.size() != 2) throw ConfigError(np + ": needs exactly two stages");
    for (size_t i = 1; i < levels.size(); ++i) {
      if (levels[i] != levels[i - 1] + 1 || backbone_strides[static_cast<size_t>(levels[i] - 1)] != 2) {
        throw ConfigError(np + ": stages " + std::to_string(levels[i - 1]) + " and " + std::to_string(levels[i]) +
                          " are not consecutive stride-2 stages");
      }
    }
  } else if (levels.size() != 1) {
    throw ConfigError(np + ": single-scale neck consumes exactly one stage");
  }
  for (int d : neck.resolved_dilations()) {
    if (d < 1) throw ConfigError(np + ": dilations must be >= 1");
  }
  if (head.upsample != 1 && head.upsample != 2) throw ConfigError("head.upsample must be 1 or 2");
  if (head.channels <= 0) throw ConfigError("head.channels must be positive");
  if (head.groups.empty()) throw ConfigError("head.groups must be nonempty");
  std::vector<bool> seen(kNumClasses, false);
  for (const auto& g : head.groups) {
    if (g.empty()) throw ConfigError("head.groups: empty class group");
    for (auto c : g) {
      if (seen[static_cast<size_t>(c)]) throw ConfigError("head.groups: class listed twice");
      seen[static_cast<size_t>(c)] = true;
    }
  }
  if (densify != "after_backbone") throw ConfigError("densify: only 'after_backbone' is supported");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json::object();
  j["schema_version"] = 1;
  j["name"] = c.name;
  j["encoder"] = c.encoder;
  j["grid"] = c.grid;
  if (c.cylindrical_grid) j["cylindrical_grid"] = *c.cylindrical_grid;
  j["backbone"] = {{"channels", c.backbone_channels}, {"strides", c.backbone_strides}};
  j["neck"] = {{"kind", neck_name(c.neck.kind)},
               {"channels", c.neck.channels},
               {"levels", c.neck.resolved_levels()},
               {"dilations", c.neck.resolved_dilations()}};
  j["head"] = {{"upsample", c.head.upsample},
               {"channels", c.head.channels},
               {"groups", class_groups_json(c.head.groups)},
               {"iou_branch", c.head.iou_branch},
               {"velocity", c.head.velocity}};
  j["densify"] = c.densify;
  j["seed"] = c.seed;
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  using json_util::check_keys;
  using json_util::get;
  using json_util::get_or;
  check_keys(j, {"schema_version", "name", "encoder", "grid", "cylindrical_grid", "backbone", "neck", "head",
                 "densify", "seed"},
             "model");
  c = ModelConfig{};
  c.name = get_or<std::string>(j, "name", "custom", "model");
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("grid")) c.grid = j.at("grid").get<GridSpec>();
  else if (c.encoder.kind == EncoderKind::kVoxel) c.grid = GridSpec::default_voxel();
  if (j.contains("cylindrical_grid")) c.cylindrical_grid = j.at("cylindrical_grid").get<GridSpec>();
  else if (c.encoder.kind == EncoderKind::kMvf) c.cylindrical_grid = GridSpec::default_cylindrical();
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    check_keys(b, {"channels", "strides"}, "backbone");
    const auto ch = get_or<std::vector<int>>(b, "channels", {c.backbone_channels.begin(), c.backbone_channels.end()}, "backbone");
    const auto st = get_or<std::vector<int>>(b, "strides", {c.backbone_strides.begin(), c.backbone_strides.end()}, "backbone");
    if (ch.size() != 4 || st.size() != 4) throw ConfigError("backbone: channels and strides need 4 entries");
    std::copy(ch.begin(), ch.end(), c.backbone_channels.begin());
    std::copy(st.begin(), st.end(), c.backbone_strides.begin());
  }
  if (j.contains("neck")) {
    const auto& n = j.at("neck");
    check_keys(n, {"kind", "channels", "levels", "dilations"}, "neck");
    c.neck.kind = parse_neck(get<std::string>(n, "kind", "neck"));
    c.neck.channels = get_or<int>(n, "channels", c.neck.channels, "neck");
    c.neck.levels = get_or<std::vector<int>>(n, "levels", {}, "neck");
    c.neck.dilations = get_or<std::vector<int>>(n, "dilations", {}, "neck");
  }
  if (j.contains("head")) {
    const auto& h = j.at("head");
    check_keys(h, {"upsample", "channels", "groups", "iou_branch", "velocity"}, "head");
    c.head.upsample = get_or<int>(h, "upsample", c.head.upsample, "head");
    c.head.channels = get_or<int>(h, "channels", c.head.channels, "head");
    c.head.iou_branch = get_or<bool>(h, "iou_branch", c.head.iou_branch, "head");
    c.head.velocity = get_or<bool>(h, "velocity", c.head.velocity, "head");
    if (h.contains("groups")) {
      c.head.groups.clear();
      for (const auto& g : h.at("groups")) {
        std::vector<ObjectClass> cls;
        for (const auto& name : g) {
          try {
            cls.push_back(parse_class(name.get<std::string>()));
          } catch (const ValidationError& e) {
            throw ConfigError(std::string("head.groups: ") + e.what());
          }
        }
        c.head.groups.push_back(std::move(cls));
      }
    }
  }
  c.densify = get_or<std::string>(j, "densify", c.densify, "model");
  c.seed = get_or<uint64_t>(j, "seed", 0, "model");
  c.validate();
}

// ---------------------------------------------------------------------------
// Build and forward

Model build_model(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  const EncoderConfig& enc = config.encoder;
  const int dec = enc.decorated_dims(config.grid);
  m.encoder.mlp = make_mlp("encoder.mlp", dec, enc.mlp_channels, config.seed);
  if (enc.kind == EncoderKind::kMvf) {
    const int cyl_dec = enc.decorated_dims(*config.cylindrical_grid);
    m.encoder.cyl_mlp = make_mlp("encoder.cyl_mlp", cyl_dec, enc.mlp_channels, config.seed);
    const int fused_in = dec + 2 * enc.out_channels();
    m.encoder.fusion = {make_linear("encoder.fusion", fused_in, enc.out_channels(), config.seed)};
  }

  GraphBuilder b(m);
  constexpr Section kS = Section::kBackbone;
  m.input_node = b.input(enc.out_channels(), config.grid.spatial_dims(), config.grid.rank());
  int x = b.conv_block(kS, "backbone.stem", m.input_node, config.backbone_channels[0], 3);
  for (int s = 0; s < 4; ++s) {
    const int c = config.backbone_channels[static_cast<size_t>(s)];
    const std::string sp = stage_name(s);
    if (config.backbone_strides[static_cast<size_t>(s)] == 2) {
      x = b.conv_block(kS, sp + ".down", x, c, 3, 2);
    } else if (b.node(x).channels != c) {
      x = b.conv_block(kS, sp + ".transition", x, c, 3);
    }
    x = b.basic_block(kS, sp + ".block0", x, c);
    x = b.basic_block(kS, sp + ".block1", x, c);
    m.stage_nodes[static_cast<size_t>(s)] = x;
  }
  build_neck(b, m);
  build_head(b, m);
  check_graph(m);
  return m;
}

SparseTensor encode(const Model& model, const PointCloud& cloud, Profile* profile) {
  const ModelConfig& c = model.config;
  const PointCloud in_range = crop_range(cloud, c.grid);
  SparseTensor st;
  switch (c.encoder.kind) {
    case EncoderKind::kPillar: st = pillar_encode(in_range, c.grid, c.encoder, model.encoder); break;
    case EncoderKind::kVoxel: st = voxel_encode(in_range, c.grid, c.encoder, model.encoder); break;
    case EncoderKind::kMvf:
      st = mvf_encode(in_range, c.grid, *c.cylindrical_grid, c.encoder, model.encoder);
      break;
  }
  if (profile) {
    const auto n = static_cast<int64_t>(in_range.size());
    auto record = [&](const std::string& name, const Linear& l) {
      LayerRecord r;
      r.name = name;
      r.op = OpKind::kInput;
      r.params = static_cast<int64_t>(l.num_params());
      r.flops = 2 * int64_t{l.cin} * l.cout * n;
      r.active_in = n;
      r.active_out = n;
      profile->push_back(r);
    };
    for (size_t i = 0; i < model.encoder.mlp.size(); ++i) record("encoder.mlp." + std::to_string(i), model.encoder.mlp[i]);
    for (size_t i = 0; i < model.encoder.cyl_mlp.size(); ++i) {
      record("encoder.cyl_mlp." + std::to_string(i), model.encoder.cyl_mlp[i]);
    }
    for (const auto& l : model.encoder.fusion) record("encoder.fusion", l);
    if (!profile->empty()) profile->back().active_out = static_cast<int64_t>(st.size());
  }
  return st;
}

std::array<SparseTensor, 4> backbone_forward(const Model& model, const SparseTensor& input, Profile* profile) {
  const Layer& in = model.layers[static_cast<size_t>(model.input_node)];
  if (input.channels != in.channels || input.dims != in.dims || input.rank != in.rank) {
    throw ValidationError("backbone input does not match the model's encoder grid");
  }
  Executor ex(model, profile);
  ex.set(model.input_node, input);
  ex.run(Section::kBackbone, {model.stage_nodes.begin(), model.stage_nodes.end()});
  std::array<SparseTensor, 4> out;
  for (size_t s = 0; s < 4; ++s) out[s] = ex.take<SparseTensor>(model.stage_nodes[s]);
  return out;
}

DenseTensor neck_forward(const Model& model, const std::array<SparseTensor, 4>& stages, Profile* profile) {
  Executor ex(model, profile);
  for (int lv : model.config.neck.resolved_levels()) {
    ex.set(model.stage_nodes[static_cast<size_t>(lv - 1)], stages[static_cast<size_t>(lv - 1)]);
  }
  ex.run(Section::kNeck, {model.neck_node});
  return ex.take<DenseTensor>(model.neck_node);
}

HeadOutput head_forward(const Model& model, const DenseTensor& neck, Profile* profile) {
  const Layer& nl = model.layers[static_cast<size_t>(model.neck_node)];
  if (neck.channels != nl.channels) throw ValidationError("head input channels do not match the neck");
  Executor ex(model, profile);
  ex.set(model.neck_node, neck);
  std::vector<int> keep;
  for (const auto& h : model.heads) {
    for (int n : {h.heatmap, h.offset, h.z, h.dims, h.yaw, h.iou, h.velocity}) {
      if (n >= 0) keep.push_back(n);
    }
  }
  ex.run(Section::kHead, keep);
  HeadOutput out;
  for (const auto& h : model.heads) {
    GroupOutput g;
    g.classes = h.classes;
    g.heatmap = ex.take<DenseTensor>(h.heatmap);
    g.offset = ex.take<DenseTensor>(h.offset);
    g.z = ex.take<DenseTensor>(h.z);
    g.dims = ex.take<DenseTensor>(h.dims);
    g.yaw = ex.take<DenseTensor>(h.yaw);
    if (h.iou >= 0) g.iou = ex.take<DenseTensor>(h.iou);
    if (h.velocity >= 0) g.velocity = ex.take<DenseTensor>(h.velocity);
    out.groups.push_back(std::move(g));
  }
  return out;
}

HeadOutput forward(const Model& model, const PointCloud& cloud, Profile* profile) {
  const SparseTensor st = encode(model, cloud, profile);
  DenseTensor neck;
  {
    const auto stages = backbone_forward(model, st, profile);
    neck = neck_forward(model, stages, profile);
  }
  return head_forward(model, neck, profile);
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json layer_index(const Model& model) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["format"] = "float32-le";
  auto& layers = j["layers"] = nlohmann::json::array();
  auto& tensors = j["tensors"] = nlohmann::json::array();
  for (const Layer& l : model.layers) {
    if (l.op == OpKind::kInput) continue;
    layers.push_back({{"name", l.name},
                      {"op", op_name(l.op)},
                      {"inputs", [&] {
                         auto a = nlohmann::json::array();
                         for (int i : l.inputs) a.push_back(model.layers[static_cast<size_t>(i)].name);
                         return a;
                       }()},
                      {"channels", l.channels},
                      {"params", l.num_params()}});
  }
  int64_t offset = 0;
  for_each_tensor(model, [&](const std::string& name, const char* part, const std::vector<float>& data,
                             const std::vector<int64_t>& shape) {
    tensors.push_back({{"name", name + "." + part}, {"offset", offset}, {"shape", shape}});
    offset += static_cast<int64_t>(data.size()) * 4;
  });
  j["total_bytes"] = offset;
  auto stages = nlohmann::json::array();
  for (int s : model.stage_nodes) stages.push_back(model.layers[static_cast<size_t>(s)].name);
  j["stage_outputs"] = stages;
  j["neck_output"] = model.layers[static_cast<size_t>(model.neck_node)].name;
  return j;
}

std::vector<uint8_t> weight_blob(const Model& model) {
  std::vector<uint8_t> out;
  for_each_tensor(model, [&](const std::string&, const char*, const std::vector<float>& data,
                             const std::vector<int64_t>&) {
    for (float v : data) {
      const auto u = std::bit_cast<uint32_t>(v);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<uint8_t>(u >> (8 * b)));
    }
  });
  return out;
}

void load_weights(Model& model, const nlohmann::json& index, std::span<const uint8_t> blob) {
  std::unordered_map<std::string, std::pair<int64_t, std::vector<int64_t>>> entries;
  for (const auto& t : index.at("tensors")) {
    entries[t.at("name").get<std::string>()] = {t.at("offset").get<int64_t>(), t.at("shape").get<std::vector<int64_t>>()};
  }
  auto fill = [&](const std::string& name, const char* part, std::vector<float>& data,
                  const std::vector<int64_t>& shape) {
    const std::string key = name + "." + part;
    const auto it = entries.find(key);
    if (it == entries.end()) throw FormatError("weights: missing tensor " + key);
    if (it->second.second != shape) throw FormatError("weights: shape mismatch for " + key);
    const auto off = static_cast<size_t>(it->second.first);
    if (off + data.size() * 4 > blob.size()) throw FormatError("weights: blob too short for " + key);
    for (size_t i = 0; i < data.size(); ++i) {
      const uint8_t* p = blob.data() + off + 4 * i;
      const uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
      data[i] = std::bit_cast<float>(u);
    }
  };
  auto linear = [&](const std::string& name, Linear& l) {
    fill(name, "weight", l.weight, {l.cout, l.cin});
    fill(name, "bias", l.bias, {l.cout});
  };
  for (size_t i = 0; i < model.encoder.mlp.size(); ++i) linear("encoder.mlp." + std::to_string(i), model.encoder.mlp[i]);
  for (size_t i = 0; i < model.encoder.cyl_mlp.size(); ++i) {
    linear("encoder.cyl_mlp." + std::to_string(i), model.encoder.cyl_mlp[i]);
  }
  for (auto& l : model.encoder.fusion) linear("encoder.fusion", l);
  for (Layer& l : model.layers) {
    if (l.is_conv()) {
      std::vector<int64_t> shape{l.conv.cout, l.conv.cin};
      for (int a = 0; a < l.conv.rank; ++a) shape.push_back(l.conv.k);
      fill(l.name, "weight", l.conv.kernel, shape);
      fill(l.name, "bias", l.conv.bias, {l.conv.cout});
    } else if (l.op == OpKind::kAffine) {
      fill(l.name, "scale", l.scale, {static_cast<int64_t>(l.scale.size())});
      fill(l.name, "shift", l.shift, {static_cast<int64_t>(l.shift.size())});
    } else if (l.op == OpKind::kFuse) {
      fill(l.name, "logits", l.fuse_logits, {static_cast<int64_t>(l.fuse_logits.size())});
    }
  }
}

void save_model(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = model.config;
  j["index"] = layer_index(model);
  j["weights"] = "weights.bin";
  const auto blob = weight_blob(model);
  {
    std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + (dir / "weights.bin").string());
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  }
  std::ofstream out(dir / "model.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (dir / "model.json").string());
  out << j.dump(2) << '\n';
}

Model load_model(const std::filesystem::path& dir) {
  const auto text = read_bytes(dir / "model.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError((dir / "model.json").string() + ": " + e.what());
  }
  Model m = build_model(j.at("config").get<ModelConfig>());
  const auto blob = read_bytes(dir / j.value("weights", std::string("weights.bin")));
  load_weights(m, j.at("index"), blob);
  return m;
}

}  // namespace griddet
