#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "griddet/grid_encoders.hpp"
#include "griddet/grid_spec.hpp"
#include "griddet/lidar_io.hpp"
#include "griddet/sparse_ops.hpp"

namespace griddet {

enum class NeckKind { kPlain, kDilated, kAspp, kFpn, kBifpn, kPillarnet };

const char* neck_name(NeckKind k);
NeckKind parse_neck(const std::string& s);

struct NeckConfig {
  NeckKind kind = NeckKind::kAspp;
  int channels = 128;
  // Backbone stages consumed (1-based). Empty selects the variant default:
  // {4} for single-scale necks, {2,3,4} for fpn/bifpn, {3,4} for pillarnet.
  std::vector<int> levels;
  // Dilation rates for aspp branches / dilated blocks. Empty selects
  // {1,6,12,18} for aspp and {2,4,6,8} for dilated.
  std::vector<int> dilations;

  std::vector<int> resolved_levels() const;
  std::vector<int> resolved_dilations() const;
};

struct HeadConfig {
  int upsample = 2;  // 1 or 2
  int channels = 64;
  std::vector<std::vector<ObjectClass>> groups{{ObjectClass::kVehicle},
                                               {ObjectClass::kPedestrian, ObjectClass::kCyclist}};
  bool iou_branch = true;
  bool velocity = false;
};

struct ModelConfig {
  std::string name = "custom";
  EncoderConfig encoder;
  GridSpec grid = GridSpec::default_pillar();
  std::optional<GridSpec> cylindrical_grid;  // mvf only
  std::array<int, 4> backbone_channels{32, 64, 128, 128};
  std::array<int, 4> backbone_strides{1, 2, 2, 2};
  NeckConfig neck;
  HeadConfig head;
  // Sparse stages are densified after the last backbone stage, before the neck.
  std::string densify = "after_backbone";
  uint64_t seed = 0;

  int backbone_downsample() const;
  // Stride of the neck output relative to the encoder grid.
  int neck_stride() const;
  // Output cell = input cell * neck stride / head upsample.
  double output_cell() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class OpKind {
  kInput,
  kSubmConv,
  kSparseConv,  // stride 2
  kConv,        // dense
  kTransposedConv,
  kAffine,
  kRelu,
  kAdd,
  kToBev,       // collapse height (rank 3) then densify
  kUpsample,
  kMaxPool,
  kConcat,
  kFuse,        // softplus-normalized weighted sum
};

const char* op_name(OpKind k);

enum class Section { kBackbone, kNeck, kHead };

struct Layer {
  std::string name;
  OpKind op = OpKind::kInput;
  Section section = Section::kBackbone;
  std::vector<int> inputs;
  int channels = 0;  // output channels
  Coord dims{1, 1, 1};
  int rank = 2;
  int stride = 1;    // output stride relative to the encoder grid
  bool sparse = false;
  ConvWeights conv;
  std::vector<float> scale;
  std::vector<float> shift;
  std::vector<float> fuse_logits;

  bool is_conv() const {
    return op == OpKind::kSubmConv || op == OpKind::kSparseConv || op == OpKind::kConv ||
           op == OpKind::kTransposedConv;
  }
  size_t num_params() const;
};

// Softplus-normalized weights of a kFuse layer.
std::vector<double> fusion_weights(const Layer& l);

struct HeadNodes {
  std::vector<ObjectClass> classes;
  int heatmap = -1, offset = -1, z = -1, dims = -1, yaw = -1, iou = -1, velocity = -1;
};

struct Model {
  ModelConfig config;
  EncoderWeights encoder;
  std::vector<Layer> layers;
  int input_node = 0;
  std::array<int, 4> stage_nodes{};
  int neck_node = -1;
  std::vector<HeadNodes> heads;

  // Heatmap output bias from the focal-init prior p = 0.01.
  static constexpr double kHeatmapPrior = 0.01;
};

Model build_model(const ModelConfig& config);

struct GroupOutput {
  std::vector<ObjectClass> classes;
  DenseTensor heatmap;  // pre-sigmoid, one channel per class
  DenseTensor offset;   // (dx, dy) in output cells
  DenseTensor z;
  DenseTensor dims;     // log(l, w, h)
  DenseTensor yaw;      // (sin, cos)
  std::optional<DenseTensor> iou;
  std::optional<DenseTensor> velocity;
};

struct HeadOutput {
  std::vector<GroupOutput> groups;
  int rows() const { return groups.empty() ? 0 : groups[0].heatmap.dims[1]; }
  int cols() const { return groups.empty() ? 0 : groups[0].heatmap.dims[2]; }
};

// Per-layer profile produced by instrumented forward passes.
struct LayerRecord {
  std::string name;
  OpKind op = OpKind::kInput;
  int64_t params = 0;
  int64_t flops = 0;
  int64_t active_in = 0;
  int64_t active_out = 0;
};

using Profile = std::vector<LayerRecord>;

SparseTensor encode(const Model& model, const PointCloud& cloud, Profile* profile = nullptr);
std::array<SparseTensor, 4> backbone_forward(const Model& model, const SparseTensor& input,
                                             Profile* profile = nullptr);
DenseTensor neck_forward(const Model& model, const std::array<SparseTensor, 4>& stages,
                         Profile* profile = nullptr);
HeadOutput head_forward(const Model& model, const DenseTensor& neck, Profile* profile = nullptr);
HeadOutput forward(const Model& model, const PointCloud& cloud, Profile* profile = nullptr);

// Serialization: JSON config plus a flat little-endian float32 blob with a
// JSON index mapping each tensor name to (offset, shape).
nlohmann::json layer_index(const Model& model);
std::vector<uint8_t> weight_blob(const Model& model);
void load_weights(Model& model, const nlohmann::json& index, std::span<const uint8_t> blob);
void save_model(const Model& model, const std::filesystem::path& dir);
Model load_model(const std::filesystem::path& dir);

}  // namespace griddet
