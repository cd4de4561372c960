#pragma once

// Shared-encoder network: a ResNet-10 style encoder feeding an FCN-8 style
// segmentation decoder and a single-scale YOLO-v2 style detection head.
//
// Layer table (width_mult = 1, default base widths):
//
//   enc.stem      conv 7x7/2 3->64, BN, ReLU, maxpool 3x3/2 (pad 1)   stride 4
//   enc.block1    BasicBlock 64->64   stride 1                      -> f4
//   enc.block2    BasicBlock 64->128  stride 2 (+1x1 projection)    -> f8
//   enc.block3    BasicBlock 128->256 stride 2 (+1x1 projection)    -> f16
//   enc.block4    BasicBlock 256->512 stride 2 (+1x1 projection)    -> f32
//   seg.score{32,16,8}  1x1 conv to C_seg (with bias), one per active tap
//   seg.upAtoB    deconv, kernel 2s stride s (s = A/B), chain 32 -> skips -> 1
//   det.conv      conv 3x3 512->512, BN, ReLU
//   det.pred      1x1 conv to A*(5+C_det) (with bias)
//
// A BasicBlock is conv3x3-BN-ReLU-conv3x3-BN plus the (projected) identity,
// followed by ReLU. The projection (1x1 conv + BN) exists whenever the block
// changes stride or width.

#include "mtlnet/ops.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mtlnet {

struct Anchor {
  double w = 1.0;  // grid-cell units
  double h = 1.0;
  bool operator==(const Anchor&) const = default;
};

std::vector<Anchor> default_anchors();

struct ModelSpec {
  Index input_height = 384;
  Index input_width = 1280;
  std::vector<std::string> seg_classes{"background", "road", "sidewalk"};
  std::vector<std::string> det_classes{"car", "person", "cyclist"};
  double width_mult = 1.0;
  std::array<Index, 4> base_widths{64, 128, 256, 512};
  std::set<int> skip_strides{8, 16};
  std::vector<Anchor> anchors = default_anchors();
  bool seg_head = true;
  bool det_head = true;
  Index stem_kernel = 7;
  Index min_channels = 8;

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;

  // ceil(base * width_mult), floored at min_channels.
  Index width(int stage) const;
  Index det_width() const { return width(3); }
  Index num_anchors() const { return static_cast<Index>(anchors.size()); }
  Index det_channels() const {
    return num_anchors() * (5 + static_cast<Index>(det_classes.size()));
  }
  Index seg_channels() const { return static_cast<Index>(seg_classes.size()); }

  bool operator==(const ModelSpec&) const = default;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);
ModelSpec load_model_spec(const std::filesystem::path& path);
void save_model_spec(const std::filesystem::path& path, const ModelSpec& spec);

enum class LayerKind { conv, deconv, batchnorm };

// One weighted layer of the network at the spec's input size, batch 1.
struct LayerInfo {
  std::string name;  // parameter prefix, e.g. "enc.block2.conv1"
  LayerKind kind = LayerKind::conv;
  Index in_ch = 0, out_ch = 0;
  Index kernel = 1, stride = 1, padding = 0;
  bool has_bias = false;
  Index in_h = 0, in_w = 0, out_h = 0, out_w = 0;

  Index param_count() const;
  // Multiply-accumulates for one image.
  Index macs() const;
};

std::vector<LayerInfo> layer_table(const ModelSpec& spec);

// Upsampling factors of the segmentation decoder, coarse to fine, with the
// strides they land on, e.g. {{32,16},{16,8},{8,1}} for both skips.
std::vector<std::pair<int, int>> seg_upsample_chain(const ModelSpec& spec);

template <typename Scalar>
class ModelParams {
 public:
  using Map = std::map<std::string, Tensor<Scalar>>;

  void insert(const std::string& name, Tensor<Scalar> t);
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  Tensor<Scalar>& at(const std::string& name);
  const Tensor<Scalar>& at(const std::string& name) const;
  const Map& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  // Names excluding batchnorm running statistics.
  std::vector<std::string> trainable_names() const;
  Index trainable_count() const;
  void zero_grad();
  // Deep copy with fresh storage.
  ModelParams clone() const;

 private:
  Map tensors_;
};

bool is_buffer_name(const std::string& name);

// He-normal conv/deconv weights, zero biases, BN gamma 1 beta 0, running
// mean 0 var 1. Each tensor draws from its own stream keyed by (seed, name).
template <typename Scalar>
ModelParams<Scalar> build(const ModelSpec& spec, std::uint64_t seed);

template <typename Scalar>
struct EncoderFeatures {
  Tensor<Scalar> f4, f8, f16, f32;
};

struct TraceEntry {
  std::string name;
  LayerKind kind;
  Shape input;
  Shape output;
};
using ForwardTrace = std::vector<TraceEntry>;

// Forward passes. Train mode normalizes with batch statistics and updates
// the running statistics stored in `params`; eval mode leaves params intact.
template <typename Scalar>
EncoderFeatures<Scalar> forward_encoder(ModelParams<Scalar>& params, const ModelSpec& spec,
                                        const Tensor<Scalar>& x,
                                        BatchNormMode mode = BatchNormMode::eval,
                                        ForwardTrace* trace = nullptr);

template <typename Scalar>
Tensor<Scalar> forward_seg(ModelParams<Scalar>& params, const ModelSpec& spec,
                           const EncoderFeatures<Scalar>& feats, ForwardTrace* trace = nullptr);

template <typename Scalar>
Tensor<Scalar> forward_det(ModelParams<Scalar>& params, const ModelSpec& spec,
                           const EncoderFeatures<Scalar>& feats,
                           BatchNormMode mode = BatchNormMode::eval,
                           ForwardTrace* trace = nullptr);

// ".mtlw" checkpoint: magic "MTLW", u32 version, u32 entry count, then per
// entry a u16 name length, the UTF-8 name and a ".ten" payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Scalar>& params);
template <typename Scalar>
void write_checkpoint(std::ostream& os, const ModelParams<Scalar>& params);
template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::filesystem::path& path);
template <typename Scalar>
ModelParams<Scalar> read_checkpoint(std::istream& is);

// Throws unless `params` holds exactly the inventory `spec` implies.
template <typename Scalar>
void check_inventory(const ModelParams<Scalar>& params, const ModelSpec& spec);

// Parameter names and shapes implied by the spec, in name order.
std::map<std::string, Shape> parameter_inventory(const ModelSpec& spec);

}  // namespace mtlnet
