#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "griddet/network.hpp"

namespace griddet {

struct LayerStats {
  std::string name;
  std::string op;
  int64_t params = 0;
  int64_t flops = 0;
  int64_t active_in = 0;
  int64_t active_out = 0;
  // Analytic receptive field in input-grid cells along one spatial axis.
  int64_t receptive_field = 1;
};

struct ParamCount {
  std::vector<std::pair<std::string, int64_t>> layers;
  int64_t total = 0;
};

struct FlopCount {
  std::vector<LayerRecord> layers;
  int64_t total = 0;
};

int64_t linear_params(int cin, int cout);
int64_t conv_params(int cin, int cout, int k, int rank);
int64_t dense_conv_flops(int cin, int cout, int k, int rank, int64_t out_sites);

ParamCount count_params(const Model& model);
// Instrumented single-threaded forward pass over the whole model.
FlopCount count_flops(const Model& model, const PointCloud& cloud);
// Backbone, neck and head only; the encoder contributes nothing.
FlopCount count_flops(const Model& model, const SparseTensor& input);

struct RfEntry {
  std::string name;
  int64_t rf = 1;
  double jump = 1.0;  // input cells between adjacent outputs
};

std::vector<RfEntry> receptive_field(const Model& model);
// Receptive field at the neck output.
int64_t neck_receptive_field(const Model& model);

struct BenchResult {
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  // Head outputs of the first and last timed iteration compared bitwise.
  bool deterministic = true;
};

BenchResult benchmark(const Model& model, const PointCloud& cloud, int warmup, int iters);

bool bitwise_equal(const HeadOutput& a, const HeadOutput& b);

enum class Tier { kT, kS, kB, kL };
const char* tier_name(Tier t);
Tier parse_tier(const std::string& s);

struct ScalePreset {
  Tier tier;
  std::array<int, 4> channels;
};

std::vector<ScalePreset> scaling_series(EncoderKind kind);
// Named preset, e.g. "pillar-T". Throws ConfigError for unknown names.
ModelConfig preset_config(EncoderKind kind, Tier tier);
ModelConfig preset_config(const std::string& name);

struct ProfileReport {
  std::string model_name;
  std::array<int, 4> channels{};
  std::vector<LayerStats> layers;
  int64_t total_params = 0;
  int64_t total_flops = 0;
  int64_t num_points = 0;
  std::optional<double> latency_ms;
};

// With `output`, the head output of the profiled forward pass is kept there.
ProfileReport profile_model(const Model& model, const PointCloud& cloud, HeadOutput* output = nullptr);
nlohmann::json profile_json(const ProfileReport& report);
// Aligned table with columns Channels, #Params (M), FLOPs (G), Latency (ms),
// followed by the per-layer breakdown when `per_layer` is set.
std::string profile_table(const ProfileReport& report, bool per_layer);

}  // namespace griddet
