#include "griddet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "griddet/error.hpp"
#include "griddet/rng.hpp"
#include "griddet/scene.hpp"

namespace griddet::ad {

namespace {

size_t volume(const std::vector<int>& shape) {
  size_t n = 1;
  for (int s : shape) n *= static_cast<size_t>(s);
  return n;
}

// log(sigmoid(x)) and log(1 - sigmoid(x)) without overflow.
double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double log_one_minus_sigmoid(double x) { return log_sigmoid(-x); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Tape::Id Tape::push(std::string op, std::vector<int> shape, std::vector<double> value,
                    std::function<void(Tape&)> back) {
  if (volume(shape) != value.size()) throw InvariantError("tape: " + op + " value does not match its shape");
  Node n;
  n.op = std::move(op);
  n.shape = std::move(shape);
  n.grad.assign(value.size(), 0.0);
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size()) - 1;
}

const Tape::Node& Tape::check(Id id, size_t rank, const char* op) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw ValidationError(std::string(op) + ": unknown tape node");
  }
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (rank != 0 && n.shape.size() != rank) {
    throw ValidationError(std::string(op) + ": expected a rank-" + std::to_string(rank) + " input");
  }
  return n;
}

Tape::Id Tape::leaf(std::vector<double> value, std::vector<int> shape) {
  return push("leaf", std::move(shape), std::move(value), nullptr);
}

Tape::Id Tape::linear(Id x, Id w, Id b) {
  const Node& nx = check(x, 2, "linear");
  const Node& nw = check(w, 2, "linear");
  const Node& nb = check(b, 1, "linear");
  const int n = nx.shape[0], cin = nx.shape[1], cout = nw.shape[0];
  if (nw.shape[1] != cin || nb.shape[0] != cout) throw ValidationError("linear: shape mismatch");
  std::vector<double> out(static_cast<size_t>(n) * cout);
  for (int r = 0; r < n; ++r) {
    for (int co = 0; co < cout; ++co) {
      double acc = nb.value[co];
      for (int ci = 0; ci < cin; ++ci) acc += nx.value[r * cin + ci] * nw.value[co * cin + ci];
      out[r * cout + co] = acc;
    }
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push("linear", {n, cout}, std::move(out), [=](Tape& t) {
    const auto& g = t.node(self).grad;
    Node& X = t.node(x);
    Node& W = t.node(w);
    Node& B = t.node(b);
    for (int r = 0; r < n; ++r) {
      for (int co = 0; co < cout; ++co) {
        const double go = g[r * cout + co];
        if (go == 0.0) continue;
        B.grad[co] += go;
        for (int ci = 0; ci < cin; ++ci) {
          X.grad[r * cin + ci] += go * W.value[co * cin + ci];
          W.grad[co * cin + ci] += go * X.value[r * cin + ci];
        }
      }
    }
  });
}

Tape::Id Tape::relu(Id x) {
  const Node& nx = check(x, 0, "relu");
  std::vector<double> out(nx.value.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = nx.value[i] > 0 ? nx.value[i] : 0.0;
  const Id self = static_cast<Id>(nodes_.size());
  return push("relu", nx.shape, std::move(out), [=](Tape& t) {
    const auto& g = t.node(self).grad;
    Node& X = t.node(x);
    for (size_t i = 0; i < g.size(); ++i) {
      if (X.value[i] > 0) X.grad[i] += g[i];
    }
  });
}

Tape::Id Tape::decorate(Id points, std::span<const int32_t> slot, std::span<const double> centers) {
  const Node& np = check(points, 2, "decorate");
  const int n = np.shape[0];
  if (np.shape[1] != 5 || slot.size() != static_cast<size_t>(n)) throw ValidationError("decorate: shape mismatch");
  const int slots = static_cast<int>(centers.size() / 2);
  std::vector<int> count(static_cast<size_t>(slots), 0);
  std::vector<double> mean(static_cast<size_t>(slots) * 3, 0.0);
  for (int i = 0; i < n; ++i) {
    if (slot[i] < 0) continue;
    if (slot[i] >= slots) throw ValidationError("decorate: slot out of range");
    ++count[slot[i]];
    for (int a = 0; a < 3; ++a) mean[slot[i] * 3 + a] += np.value[i * 5 + a];
  }
  for (int s = 0; s < slots; ++s) {
    for (int a = 0; a < 3; ++a) mean[s * 3 + a] /= std::max(count[s], 1);
  }
  constexpr int kD = 10;
  std::vector<double> out(static_cast<size_t>(n) * kD, 0.0);
  for (int i = 0; i < n; ++i) {
    if (slot[i] < 0) continue;
    const double* p = &np.value[i * 5];
    double* o = &out[i * kD];
    for (int a = 0; a < 5; ++a) o[a] = p[a];
    for (int a = 0; a < 3; ++a) o[5 + a] = p[a] - mean[slot[i] * 3 + a];
    o[8] = p[0] - centers[slot[i] * 2];
    o[9] = p[1] - centers[slot[i] * 2 + 1];
  }
  const Id self = static_cast<Id>(nodes_.size());
  std::vector<int32_t> slot_copy(slot.begin(), slot.end());
  return push("decorate", {n, kD}, std::move(out), [=](Tape& t) {
    const auto& g = t.node(self).grad;
    Node& P = t.node(points);
    std::vector<double> gsum(static_cast<size_t>(slots) * 3, 0.0);
    for (int i = 0; i < n; ++i) {
      if (slot_copy[i] < 0) continue;
      for (int a = 0; a < 3; ++a) gsum[slot_copy[i] * 3 + a] += g[i * kD + 5 + a];
    }
    for (int i = 0; i < n; ++i) {
      const int s = slot_copy[i];
      if (s < 0) continue;
      for (int a = 0; a < 5; ++a) P.grad[i * 5 + a] += g[i * kD + a];
      for (int a = 0; a < 3; ++a) P.grad[i * 5 + a] += g[i * kD + 5 + a] - gsum[s * 3 + a] / count[s];
      P.grad[i * 5 + 0] += g[i * kD + 8];
      P.grad[i * 5 + 1] += g[i * kD + 9];
    }
  });
}

Tape::Id Tape::scatter_max(Id x, std::span<const int32_t> slot, int num_slots) {
  const Node& nx = check(x, 2, "scatter_max");
  const int n = nx.shape[0], c = nx.shape[1];
  if (slot.size() != static_cast<size_t>(n)) throw ValidationError("scatter_max: slot count mismatch");
  std::vector<double> out(static_cast<size_t>(num_slots) * c, 0.0);
  std::vector<int32_t> arg(out.size(), -1);
  for (int i = 0; i < n; ++i) {
    const int s = slot[i];
    if (s < 0) continue;
    if (s >= num_slots) throw ValidationError("scatter_max: slot out of range");
    for (int ch = 0; ch < c; ++ch) {
      const size_t k = static_cast<size_t>(s) * c + ch;
      // Strict comparison keeps the lowest row on ties.
      if (arg[k] < 0 || nx.value[i * c + ch] > out[k]) {
        out[k] = nx.value[i * c + ch];
        arg[k] = i;
      }
    }
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push("scatter_max", {num_slots, c}, std::move(out), [=](Tape& t) {
    const auto& g = t.node(self).grad;
    Node& X = t.node(x);
    for (size_t k = 0; k < arg.size(); ++k) {
      if (arg[k] >= 0) X.grad[static_cast<size_t>(arg[k]) * c + k % c] += g[k];
    }
  });
}

Tape::Id Tape::to_grid(Id x, std::span<const int64_t> cells, int height, int width) {
  const Node& nx = check(x, 2, "to_grid");
  const int m = nx.shape[0], c = nx.shape[1];
  if (cells.size() != static_cast<size_t>(m)) throw ValidationError("to_grid: cell count mismatch");
  const int64_t plane = int64_t{height} * width;
  std::vector<double> out(static_cast<size_t>(c * plane), 0.0);
  for (int r = 0; r < m; ++r) {
    if (cells[r] < 0 || cells[r] >= plane) throw ValidationError("to_grid: cell outside the grid");
    for (int ch = 0; ch < c; ++ch) out[ch * plane + cells[r]] += nx.value[r * c + ch];
  }
  const Id self = static_cast<Id>(nodes_.size());
  std::vector<int64_t> cell_copy(cells.begin(), cells.end());
  return push("to_grid", {c, height, width}, std::move(out), [=](Tape& t) {
    const auto& g = t.node(self).grad;
    Node& X = t.node(x);
    for (int r = 0; r < m; ++r) {
      for (int ch = 0; ch < c; ++ch) X.grad[r * c + ch] += g[ch * plane + cell_copy[r]];
    }
  });
}

Tape::Id Tape::conv2d(Id x, Id w, Id b, int dilation) {
  const Node& nx = check(x, 3, "conv2d");
  const Node& nw = check(w, 4, "conv2d");
  const Node& nb = check(b, 1, "conv2d");
  const int cin = nx.shape[0], h = nx.shape[1], wd = nx.shape[2];
  const int cout = nw.shape[0], k = nw.shape[2];
  if (nw.shape[1] != cin || nw.shape[3] != k || nb.shape[0] != cout || k % 2 == 0 || dilation < 1) {
    throw ValidationError("conv2d: shape mismatch");
  }
  const int pad = (k - 1) / 2 * dilation;
  const int64_t plane = int64_t{h} * wd;
  std::vector<double> out(static_cast<size_t>(cout * plane));
  for (int co = 0; co < cout; ++co) {
    double* o = &out[co * plane];
    std::fill(o, o + plane, nb.value[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* in = &nx.value[ci * plane];
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = nw.value[((co * cin + ci) * k + ky) * k + kx];
          const int dy = ky * dilation - pad, dx = kx * dilation - pad;
          for (int r = std::max(0, -dy); r < std::min(h, h - dy); ++r) {
            for (int q = std::max(0, -dx); q < std::min(wd, wd - dx); ++q) {
              o[r * wd + q] += wv * in[(r + dy) * wd + q + dx];
            }
          }
        }
      }
    }
  }
  const Id self = static_cast<Id>(nodes_.size());
  return push("conv2d", {cout, h, wd}, std::move(out), [=](Tape& t) {
    const auto& g = t.node(self).grad;
    Node& X = t.node(x);
    Node& W = t.node(w);
    Node& B = t.node(b);
    for (int co = 0; co < cout; ++co) {
      const double* go = &g[co * plane];
      for (int64_t i = 0; i < plane; ++i) B.grad[co] += go[i];
      for (int ci = 0; ci < cin; ++ci) {
        const double* in = &X.value[ci * plane];
        double* gin = &X.grad[ci * plane];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const size_t wi = static_cast<size_t>(((co * cin + ci) * k + ky) * k + kx);
            const double wv = W.value[wi];
            const int dy = ky * dilation - pad, dx = kx * dilation - pad;
            double gw = 0.0;
            for (int r = std::max(0, -dy); r < std::min(h, h - dy); ++r) {
              for (int q = std::max(0, -dx); q < std::min(wd, wd - dx); ++q) {
                const double gv = go[r * wd + q];
                gw += gv * in[(r + dy) * wd + q + dx];
                gin[(r + dy) * wd + q + dx] += gv * wv;
              }
            }
            W.grad[wi] += gw;
          }
        }
      }
    }
  });
}

double focal_term(double p, double target) {
  const double eps = 1e-300;
  if (target >= 1.0) return -(1.0 - p) * (1.0 - p) * std::log(std::max(p, eps));
  return -std::pow(1.0 - target, 4) * p * p * std::log(std::max(1.0 - p, eps));
}

Tape::Id Tape::focal_loss(Id logits, int channel, std::span<const double> target) {
  const Node& nl = check(logits, 3, "focal_loss");
  const int64_t plane = int64_t{nl.shape[1]} * nl.shape[2];
  if (channel < 0 || channel >= nl.shape[0] || target.size() != static_cast<size_t>(plane)) {
    throw ValidationError("focal_loss: shape mismatch");
  }
  int64_t positives = 0;
  for (double t : target) positives += t >= 1.0 ? 1 : 0;
  const double norm = static_cast<double>(std::max<int64_t>(1, positives));
  double loss = 0.0;
  const double* x = &nl.value[channel * plane];
  for (int64_t i = 0; i < plane; ++i) {
    const double p = sigmoid(x[i]);
    if (target[i] >= 1.0) loss -= (1 - p) * (1 - p) * log_sigmoid(x[i]);
    else loss -= std::pow(1 - target[i], 4) * p * p * log_one_minus_sigmoid(x[i]);
  }
  const Id self = static_cast<Id>(nodes_.size());
  std::vector<double> tcopy(target.begin(), target.end());
  return push("focal_loss", {1}, {loss / norm}, [=](Tape& t) {
    const double g = t.node(self).grad[0] / norm;
    Node& L = t.node(logits);
    for (int64_t i = 0; i < plane; ++i) {
      const double xv = L.value[channel * plane + i];
      const double p = sigmoid(xv);
      double d;
      if (tcopy[i] >= 1.0) {
        d = (1 - p) * (1 - p) * (2 * p * log_sigmoid(xv) - (1 - p));
      } else {
        d = -std::pow(1 - tcopy[i], 4) * p * p * (2 * (1 - p) * log_one_minus_sigmoid(xv) - p);
      }
      L.grad[channel * plane + i] += g * d;
    }
  });
}

Tape::Id Tape::l1_at(Id map, std::span<const Site> sites, double norm, double beta) {
  const Node& nm = check(map, 3, "l1_at");
  const int c = nm.shape[0], h = nm.shape[1], w = nm.shape[2];
  if (!(norm > 0)) throw ValidationError("l1_at: norm must be positive");
  if (!(beta >= 0)) throw ValidationError("l1_at: beta must be >= 0");
  auto penalty = [beta](double d) {
    const double a = std::fabs(d);
    return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  };
  std::vector<size_t> idx;
  double loss = 0.0;
  for (const auto& s : sites) {
    if (s.channel < 0 || s.channel >= c || s.row < 0 || s.row >= h || s.col < 0 || s.col >= w) {
      throw ValidationError("l1_at: site outside the map");
    }
    idx.push_back((static_cast<size_t>(s.channel) * h + s.row) * w + s.col);
    loss += penalty(nm.value[idx.back()] - s.target);
  }
  const Id self = static_cast<Id>(nodes_.size());
  std::vector<double> targets;
  for (const auto& s : sites) targets.push_back(s.target);
  return push("l1_at", {1}, {loss / norm}, [=](Tape& t) {
    const double g = t.node(self).grad[0] / norm;
    Node& M = t.node(map);
    for (size_t k = 0; k < idx.size(); ++k) {
      const double d = M.value[idx[k]] - targets[k];
      const double slope = std::fabs(d) < beta ? d / beta : d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0;
      M.grad[idx[k]] += g * slope;
    }
  });
}

Tape::Id Tape::weighted_sum(std::span<const Id> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw ValidationError("weighted_sum: size mismatch");
  double v = 0.0;
  for (size_t i = 0; i < terms.size(); ++i) {
    const Node& n = check(terms[i], 0, "weighted_sum");
    if (n.value.size() != 1) throw ValidationError("weighted_sum: terms must be scalars");
    v += weights[i] * n.value[0];
  }
  const Id self = static_cast<Id>(nodes_.size());
  std::vector<Id> ids(terms.begin(), terms.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return push("weighted_sum", {1}, {v}, [=](Tape& t) {
    const double g = t.node(self).grad[0];
    for (size_t i = 0; i < ids.size(); ++i) t.node(ids[i]).grad[0] += g * ws[i];
  });
}

void Tape::zero_grad() {
  for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tape::backward(Id root) {
  if (check(root, 0, "backward").value.size() != 1) throw ValidationError("backward: root must be a scalar");
  zero_grad();
  node(root).grad[0] = 1.0;
  for (Id i = root; i >= 0; --i) {
    if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this);
  }
}

// ---------------------------------------------------------------------------
// Toy chain

namespace {

std::vector<double> he_normal(const std::string& name, size_t n, int fan_in, uint64_t seed) {
  const CounterRng rng(seed, hash_name(name.c_str()));
  std::vector<double> v(n);
  const double sd = std::sqrt(2.0 / fan_in);
  for (size_t i = 0; i < n; ++i) v[i] = sd * rng.normal(i);
  return v;
}

}  // namespace

ChainParams ChainParams::init(const ChainConfig& c) {
  ChainParams p;
  auto add = [&](std::vector<double> v, std::vector<int> s) {
    p.tensors.push_back(std::move(v));
    p.shapes.push_back(std::move(s));
  };
  int cin = 10;
  for (size_t i = 0; i < c.mlp_channels.size(); ++i) {
    const int co = c.mlp_channels[i];
    add(he_normal("toy.mlp." + std::to_string(i), static_cast<size_t>(co) * cin, cin, c.seed), {co, cin});
    add(std::vector<double>(static_cast<size_t>(co), 0.0), {co});
    cin = co;
  }
  const int taps = c.kernel * c.kernel;
  for (size_t i = 0; i < c.conv_channels.size(); ++i) {
    const int co = c.conv_channels[i];
    add(he_normal("toy.conv." + std::to_string(i), static_cast<size_t>(co) * cin * taps, cin * taps, c.seed),
        {co, cin, c.kernel, c.kernel});
    add(std::vector<double>(static_cast<size_t>(co), 0.0), {co});
    cin = co;
  }
  auto head = he_normal("toy.head", static_cast<size_t>(kHeadChannels) * cin, cin, c.seed);
  // Small regression init keeps the first steps in the linear regime.
  for (auto& v : head) v *= 0.1;
  add(std::move(head), {kHeadChannels, cin, 1, 1});
  std::vector<double> hb(kHeadChannels, 0.0);
  hb[0] = -std::log((1.0 - 0.01) / 0.01);
  add(std::move(hb), {kHeadChannels});
  return p;
}

size_t ChainParams::count() const {
  size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

ChainTargets make_targets(const ChainConfig& config, std::span<const Box3D> boxes) {
  const auto& ax = config.grid.axes[0];
  const auto& ay = config.grid.axes[1];
  const int h = ay.dims(), w = ax.dims();
  ChainTargets t;
  t.heatmap.assign(static_cast<size_t>(h) * w, 0.0);
  const double s2 = 2.0 * config.gaussian_sigma * config.gaussian_sigma;
  for (const Box3D& b : boxes) {
    const auto col = ax.index(b.center.x);
    const auto row = ay.index(b.center.y);
    if (!col || !row) throw ValidationError("toy target: box center outside the grid");
    t.boxes.push_back(b);
    t.centers.emplace_back(*row, *col);
    for (int r = 0; r < h; ++r) {
      for (int q = 0; q < w; ++q) {
        const double d2 = double(r - *row) * (r - *row) + double(q - *col) * (q - *col);
        auto& v = t.heatmap[static_cast<size_t>(r) * w + q];
        v = std::max(v, d2 == 0 ? 1.0 : std::exp(-d2 / s2));
      }
    }
    const double gx = (b.center.x - ax.min) / ax.cell - *col;
    const double gy = (b.center.y - ay.min) / ay.cell - *row;
    const double vals[8] = {gx, gy, b.center.z, std::log(b.l), std::log(b.w), std::log(b.h), std::sin(b.yaw),
                            std::cos(b.yaw)};
    for (int k = 0; k < 8; ++k) t.box_sites.push_back({1 + k, *row, *col, vals[k]});
  }
  return t;
}

namespace {

std::vector<double> point_rows(const PointCloud& cloud) {
  std::vector<double> pts;
  pts.reserve(cloud.size() * 5);
  for (const Point& p : cloud.points) pts.insert(pts.end(), {p.x, p.y, p.z, p.intensity, p.dt});
  return pts;
}

ChainGraph build_chain_rows(const ChainConfig& config, const ChainParams& params, const std::vector<double>& pts,
                            const ChainTargets& targets, const std::optional<std::vector<double>>& frozen_iou) {
  ChainGraph g;
  Tape& t = g.tape;
  const GridSpec& grid = config.grid;
  const auto& ax = grid.axes[0];
  const auto& ay = grid.axes[1];
  const int h = ay.dims(), w = ax.dims();

  const int n = static_cast<int>(pts.size() / 5);
  std::vector<int64_t> cell_of_point;
  for (int i = 0; i < n; ++i) {
    const auto c = grid.cell_of(pts[i * 5], pts[i * 5 + 1], pts[i * 5 + 2]);
    cell_of_point.push_back(c ? grid.linear_index(*c) : -1);
  }
  std::vector<int64_t> cells;
  for (int64_t c : cell_of_point) {
    if (c >= 0) cells.push_back(c);
  }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  std::vector<int32_t> slot(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    if (cell_of_point[i] >= 0) {
      slot[i] = static_cast<int32_t>(std::lower_bound(cells.begin(), cells.end(), cell_of_point[i]) - cells.begin());
    }
  }
  std::vector<double> centers;
  for (int64_t c : cells) {
    centers.push_back(ax.cell_center(static_cast<int32_t>(c % w)));
    centers.push_back(ay.cell_center(static_cast<int32_t>(c / w)));
  }

  g.points = t.leaf(pts, {n, 5});
  for (size_t i = 0; i < params.tensors.size(); ++i) g.params.push_back(t.leaf(params.tensors[i], params.shapes[i]));

  size_t pi = 0;
  Tape::Id x = t.decorate(g.points, slot, centers);
  for (size_t i = 0; i < config.mlp_channels.size(); ++i, pi += 2) {
    x = t.relu(t.linear(x, g.params[pi], g.params[pi + 1]));
  }
  x = t.scatter_max(x, slot, static_cast<int>(cells.size()));
  x = t.to_grid(x, cells, h, w);
  for (size_t i = 0; i < config.conv_channels.size(); ++i, pi += 2) {
    x = t.relu(t.conv2d(x, g.params[pi], g.params[pi + 1]));
  }
  const Tape::Id head = t.conv2d(x, g.params[pi], g.params[pi + 1]);

  const Tape::Id heat = t.focal_loss(head, 0, targets.heatmap);
  const double nobj = static_cast<double>(std::max<size_t>(1, targets.boxes.size()));
  const Tape::Id box = t.l1_at(head, targets.box_sites, nobj, config.box_beta);

  // IoU target: BEV IoU of the current decoded box against its label.
  const auto& hv = t.value(head);
  const int64_t plane = int64_t{h} * w;
  std::vector<Tape::Site> iou_sites;
  for (size_t k = 0; k < targets.boxes.size(); ++k) {
    const auto [row, col] = targets.centers[k];
    auto at = [&](int ch) { return hv[static_cast<size_t>(ch * plane + int64_t{row} * w + col)]; };
    double iou;
    if (frozen_iou) {
      iou = frozen_iou->at(k);
    } else {
      Box3D d;
      d.center = {ax.min + (col + at(1)) * ax.cell, ay.min + (row + at(2)) * ay.cell, at(3)};
      d.l = std::exp(std::clamp(at(4), -10.0, 10.0));
      d.w = std::exp(std::clamp(at(5), -10.0, 10.0));
      d.h = std::exp(std::clamp(at(6), -10.0, 10.0));
      d.yaw = wrap_angle(std::atan2(at(7), at(8)));
      iou = iou_bev(d, targets.boxes[k]);
    }
    g.out.iou_targets.push_back(iou);
    iou_sites.push_back({9, row, col, iou});
  }
  const Tape::Id iou = t.l1_at(head, iou_sites, nobj);
  const Tape::Id terms[3] = {heat, box, iou};
  const double weights[3] = {config.heat_weight, config.box_weight, config.iou_weight};
  g.loss = t.weighted_sum(terms, weights);
  g.out.loss = t.scalar(g.loss);
  g.out.heat = t.scalar(heat);
  g.out.box = t.scalar(box);
  g.out.iou = t.scalar(iou);
  return g;
}

}  // namespace

ChainGraph build_chain(const ChainConfig& config, const ChainParams& params, const PointCloud& cloud,
                       const ChainTargets& targets, const std::optional<std::vector<double>>& frozen_iou) {
  return build_chain_rows(config, params, point_rows(cloud), targets, frozen_iou);
}

FitResult toy_fit(const ChainConfig& config, const PointCloud& cloud, std::span<const Box3D> boxes, int steps,
                  double lr) {
  if (steps < 0) throw ConfigError("toy_fit: steps must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("toy_fit: lr must be >= 0");
  if (config.decay_steps < 0) throw ConfigError("toy_fit: decay_steps must be >= 0");
  FitResult r;
  r.params = ChainParams::init(config);
  const ChainTargets targets = make_targets(config, boxes);
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s <= steps; ++s) {
    ChainGraph g = build_chain(config, r.params, cloud, targets);
    r.trace.push_back(g.out.loss);
    best = std::min(best, g.out.loss);
    r.best_so_far.push_back(best);
    if (s == steps) break;
    g.tape.backward(g.loss);
    const double step_lr =
        config.decay_steps > 0 ? lr * std::max(0.0, 1.0 - static_cast<double>(s) / config.decay_steps) : lr;
    for (size_t i = 0; i < r.params.tensors.size(); ++i) {
      const auto& grad = g.tape.grad(g.params[i]);
      for (size_t k = 0; k < grad.size(); ++k) r.params.tensors[i][k] -= step_lr * grad[k];
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checks

double relative_error(std::span<const double> a, std::span<const double> n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

namespace {

// Builds a scalar from leaf values; leaves are pushed first, in order.
using GraphFn = std::function<Tape::Id(Tape&, const std::vector<std::vector<double>>&)>;

double check_graph(const GraphFn& fn, std::vector<std::vector<double>> leaves, const std::vector<bool>& diff,
                   double eps) {
  Tape tape;
  const Tape::Id root = fn(tape, leaves);
  tape.backward(root);
  double worst = 0.0;
  for (size_t l = 0; l < leaves.size(); ++l) {
    if (!diff[l]) continue;
    const std::vector<double> analytic = tape.grad(static_cast<Tape::Id>(l));
    std::vector<double> numeric(leaves[l].size());
    for (size_t i = 0; i < leaves[l].size(); ++i) {
      const double orig = leaves[l][i];
      leaves[l][i] = orig + eps;
      Tape tp;
      const double fp = tp.scalar(fn(tp, leaves));
      leaves[l][i] = orig - eps;
      Tape tm;
      const double fm = tm.scalar(fn(tm, leaves));
      leaves[l][i] = orig;
      numeric[i] = (fp - fm) / (2 * eps);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

std::vector<double> randn(RngStream& rng, size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

int pick(RngStream& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1))); }

}  // namespace

Tape::Id Tape::dot(Id x, std::span<const double> weights) {
  const Node& nx = check(x, 0, "dot");
  if (weights.size() != nx.value.size()) throw ValidationError("dot: size mismatch");
  double v = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) v += weights[i] * nx.value[i];
  const Id self = static_cast<Id>(nodes_.size());
  std::vector<double> ws(weights.begin(), weights.end());
  return push("dot", {1}, {v}, [=](Tape& t) {
    const double g = t.node(self).grad[0];
    Node& X = t.node(x);
    for (size_t i = 0; i < ws.size(); ++i) X.grad[i] += g * ws[i];
  });
}

std::vector<GradcheckResult> gradcheck_all(int seeds, double eps, double tol) {
  if (seeds < 1) throw ConfigError("gradcheck: seeds must be >= 1");
  using Leaves = std::vector<std::vector<double>>;
  std::vector<GradcheckResult> results;
  auto run = [&](const std::string& name, const std::function<double(uint64_t)>& one) {
    GradcheckResult r;
    r.op = name;
    r.seeds = seeds;
    for (int s = 0; s < seeds; ++s) r.max_rel_error = std::max(r.max_rel_error, one(static_cast<uint64_t>(s)));
    r.passed = r.max_rel_error <= tol;
    results.push_back(r);
  };

  run("linear", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.linear"));
    const int n = pick(rng, 2, 6), cin = pick(rng, 1, 5), cout = pick(rng, 1, 5);
    const auto proj = randn(rng, static_cast<size_t>(n) * cout);
    GraphFn fn = [=](Tape& t, const Leaves& L) {
      const auto x = t.leaf(L[0], {n, cin});
      const auto w = t.leaf(L[1], {cout, cin});
      const auto b = t.leaf(L[2], {cout});
      return t.dot(t.linear(x, w, b), proj);
    };
    return check_graph(fn, {randn(rng, n * cin), randn(rng, cout * cin), randn(rng, cout)}, {true, true, true}, eps);
  });

  run("relu", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.relu"));
    const int n = pick(rng, 4, 30);
    const auto proj = randn(rng, n);
    GraphFn fn = [=](Tape& t, const Leaves& L) { return t.dot(t.relu(t.leaf(L[0], {n})), proj); };
    return check_graph(fn, {randn(rng, n)}, {true}, eps);
  });

  run("decorate", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.decorate"));
    const int n = pick(rng, 3, 12), slots = pick(rng, 1, 4);
    std::vector<int32_t> slot(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) slot[i] = i < slots ? i : static_cast<int32_t>(rng.below(slots + 1)) - 1;
    const auto centers = randn(rng, 2 * slots);
    const auto proj = randn(rng, static_cast<size_t>(n) * 10);
    GraphFn fn = [=](Tape& t, const Leaves& L) {
      return t.dot(t.decorate(t.leaf(L[0], {n, 5}), slot, centers), proj);
    };
    return check_graph(fn, {randn(rng, n * 5)}, {true}, eps);
  });

  run("scatter_max", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.scatter_max"));
    const int n = pick(rng, 3, 12), c = pick(rng, 1, 4), slots = pick(rng, 1, 4);
    std::vector<int32_t> slot(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) slot[i] = static_cast<int32_t>(rng.below(slots));
    const auto proj = randn(rng, static_cast<size_t>(slots) * c);
    GraphFn fn = [=](Tape& t, const Leaves& L) {
      return t.dot(t.scatter_max(t.leaf(L[0], {n, c}), slot, slots), proj);
    };
    return check_graph(fn, {randn(rng, n * c)}, {true}, eps);
  });

  run("to_grid", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.to_grid"));
    const int h = pick(rng, 2, 5), w = pick(rng, 2, 5), c = pick(rng, 1, 3);
    std::vector<int64_t> all(static_cast<size_t>(h) * w);
    std::iota(all.begin(), all.end(), 0);
    const int m = pick(rng, 1, h * w);
    for (int i = 0; i < m; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
    std::vector<int64_t> cells(all.begin(), all.begin() + m);
    const auto proj = randn(rng, static_cast<size_t>(c) * h * w);
    GraphFn fn = [=](Tape& t, const Leaves& L) { return t.dot(t.to_grid(t.leaf(L[0], {m, c}), cells, h, w), proj); };
    return check_graph(fn, {randn(rng, m * c)}, {true}, eps);
  });

  for (int dil : {1, 2}) {
    run(dil == 1 ? "conv2d" : "conv2d_dilated", [&, dil](uint64_t seed) {
      RngStream rng(seed, hash_name(dil == 1 ? "gc.conv2d" : "gc.conv2d_dilated"));
      const int cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
      const int k = rng.bernoulli(0.5) ? 3 : 1;
      const auto proj = randn(rng, static_cast<size_t>(cout) * h * w);
      GraphFn fn = [=](Tape& t, const Leaves& L) {
        const auto x = t.leaf(L[0], {cin, h, w});
        const auto wt = t.leaf(L[1], {cout, cin, k, k});
        const auto b = t.leaf(L[2], {cout});
        return t.dot(t.conv2d(x, wt, b, dil), proj);
      };
      return check_graph(fn, {randn(rng, cin * h * w), randn(rng, cout * cin * k * k), randn(rng, cout)},
                         {true, true, true}, eps);
    });
  }

  run("focal_loss", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.focal"));
    const int c = pick(rng, 1, 3), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    const int ch = static_cast<int>(rng.below(c));
    std::vector<double> target(static_cast<size_t>(h) * w);
    for (auto& v : target) v = rng.bernoulli(0.2) ? 1.0 : rng.uniform(0.0, 0.95);
    GraphFn fn = [=](Tape& t, const Leaves& L) { return t.focal_loss(t.leaf(L[0], {c, h, w}), ch, target); };
    return check_graph(fn, {randn(rng, c * h * w, 2.0)}, {true}, eps);
  });

  for (double beta : {0.0, 0.5}) {
    run(beta == 0.0 ? "l1_at" : "smooth_l1_at", [&, beta](uint64_t seed) {
      RngStream rng(seed, hash_name(beta == 0.0 ? "gc.l1" : "gc.smooth_l1"));
      const int c = pick(rng, 1, 3), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
      std::vector<Tape::Site> sites;
      for (int i = pick(rng, 1, 6); i > 0; --i) {
        sites.push_back({static_cast<int>(rng.below(c)), static_cast<int>(rng.below(h)),
                         static_cast<int>(rng.below(w)), rng.normal()});
      }
      GraphFn fn = [=](Tape& t, const Leaves& L) { return t.l1_at(t.leaf(L[0], {c, h, w}), sites, 1.5, beta); };
      return check_graph(fn, {randn(rng, c * h * w)}, {true}, eps);
    });
  }

  run("weighted_sum", [&](uint64_t seed) {
    RngStream rng(seed, hash_name("gc.weighted_sum"));
    const int n = pick(rng, 1, 4);
    const auto ws = randn(rng, n);
    GraphFn fn = [=](Tape& t, const Leaves& L) {
      std::vector<Tape::Id> ids;
      for (int i = 0; i < n; ++i) ids.push_back(t.leaf(L[i], {1}));
      std::vector<Tape::Id> act;
      for (auto id : ids) act.push_back(t.relu(id));
      return t.weighted_sum(act, ws);
    };
    Leaves leaves;
    for (int i = 0; i < n; ++i) leaves.push_back(randn(rng, 1));
    return check_graph(fn, leaves, std::vector<bool>(n, true), eps);
  });

  // Full chain on the toy scene. With `inputs`, the scene is shifted off the
  // cell edges its points sit on so point gradients are well defined, and
  // only the point gradient is checked.
  auto chain_check = [&](uint64_t seed, bool inputs) {
    RngStream rng(seed, hash_name("gc.chain"));
    ChainConfig cfg;
    cfg.mlp_channels = {4};
    cfg.conv_channels = {4};
    cfg.seed = seed;
    Scene scene = toy_scene();
    if (inputs) {
      for (auto& p : scene.cloud.points) {
        p.x += 0.05f;
        p.y += 0.05f;
      }
    }
    std::vector<Box3D> boxes;
    for (const auto& l : scene.labels) boxes.push_back(l.box);
    const ChainTargets targets = make_targets(cfg, boxes);
    ChainParams params = ChainParams::init(cfg);
    // Zero biases put empty cells exactly on the ReLU kink; random biases and
    // head weights move every pre-activation off it.
    for (size_t l = 1; l < params.tensors.size(); l += 2) {
      for (auto& v : params.tensors[l]) v += rng.normal() * 0.3;
    }
    for (auto& v : params.tensors[params.tensors.size() - 2]) v = rng.normal() * 0.5;
    const std::vector<double> rows = point_rows(scene.cloud);
    const auto frozen = build_chain_rows(cfg, params, rows, targets, std::nullopt).out.iou_targets;
    ChainGraph g = build_chain_rows(cfg, params, rows, targets, frozen);
    g.tape.backward(g.loss);
    auto fd = [&](std::vector<double>& v, const auto& eval) {
      std::vector<double> numeric(v.size());
      for (size_t i = 0; i < v.size(); ++i) {
        const double orig = v[i];
        v[i] = orig + eps;
        const double fp = eval();
        v[i] = orig - eps;
        const double fm = eval();
        v[i] = orig;
        numeric[i] = (fp - fm) / (2 * eps);
      }
      return numeric;
    };
    if (inputs) {
      std::vector<double> r = rows;
      const auto numeric = fd(r, [&] { return build_chain_rows(cfg, params, r, targets, frozen).out.loss; });
      return relative_error(g.tape.grad(g.points), numeric);
    }
    double worst = 0.0;
    ChainParams p = params;
    for (size_t l = 0; l < params.tensors.size(); ++l) {
      const auto numeric =
          fd(p.tensors[l], [&] { return build_chain_rows(cfg, p, rows, targets, frozen).out.loss; });
      worst = std::max(worst, relative_error(g.tape.grad(g.params[l]), numeric));
    }
    return worst;
  };
  run("chain", [&](uint64_t seed) { return chain_check(seed, false); });
  run("chain_inputs", [&](uint64_t seed) { return chain_check(seed, true); });
  return results;
}

}  // namespace griddet::ad
