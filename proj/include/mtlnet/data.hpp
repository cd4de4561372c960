#pragma once

// Synthetic driving scenes and dataset I/O.
//
// A scene is a pure function of (config, index): every random draw comes from
// Rng::keyed(config.seed, stream, index) and the renderer uses only integer
// arithmetic, IEEE +-*/ and sqrt, so datasets are identical across platforms,
// thread counts and generation order.
//
// Dataset directory:
//   images/{id}.ppm   RGB image
//   seg/{id}.pgm      label map (class index per pixel)
//   boxes/{id}.jsonl  one {"class","class_idx","cx","cy","w","h"} per line
//   meta.json         config echo, class lists, per-file git blob SHA-1s

#include "mtlnet/box.hpp"
#include "mtlnet/image.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mtlnet {

enum class RoadwayVariant {
  kitti3,   // background, road, sidewalk
  fisheye4  // background, road, lane, curb
};

struct SizeRange {
  double min = 0, max = 0;
  bool operator==(const SizeRange&) const = default;
};

struct SceneConfig {
  std::uint64_t seed = 0;
  Index height = 96, width = 128;
  RoadwayVariant variant = RoadwayVariant::kitti3;
  // Objects per image for car, person, cyclist: inclusive [min, max].
  std::array<std::array<int, 2>, 3> object_counts{{{0, 2}, {0, 1}, {0, 1}}};
  // Object heights as fractions of the image height.
  std::array<SizeRange, 3> object_heights{{{0.25, 0.40}, {0.30, 0.45}, {0.30, 0.42}}};
  double horizon_fraction = 0.4;
  double noise = 0.04;  // peak amplitude of per-pixel noise, in [0, 1] intensity units
  SizeRange road_bottom_width{0.55, 0.85};  // fraction of image width
  SizeRange road_top_width{0.08, 0.20};
  SizeRange road_center_shift{-0.15, 0.15};
  SizeRange sidewalk_width{0.16, 0.30};  // fraction of image width at the bottom row
  double min_center_separation = 32;     // pixels, between object centres
  int max_placement_retries = 64;

  void validate() const;
  Index horizon_row() const;
  std::vector<std::string> seg_classes() const;
  static std::vector<std::string> det_classes() { return {"car", "person", "cyclist"}; }
  bool operator==(const SceneConfig&) const = default;
};

void to_json(nlohmann::json& j, const SceneConfig& cfg);
void from_json(const nlohmann::json& j, SceneConfig& cfg);

struct Sample {
  std::string image_id;
  RgbImage image;
  GrayImage seg;
  std::vector<GtBox> boxes;
  int dropped_objects = 0;  // requested objects that could not be placed
};

std::string sample_id(std::uint64_t index);
Sample generate(const SceneConfig& cfg, std::uint64_t index);

// Pixel-space boxes for evaluation.
std::vector<LabeledBox> labeled_boxes(const std::vector<GtBox>& boxes, Index image_w, Index image_h);

// Box annotation lines.
std::string boxes_to_jsonl(const std::vector<GtBox>& boxes, const std::vector<std::string>& class_names);
std::vector<GtBox> boxes_from_jsonl(std::string_view text, const std::vector<std::string>& class_names);

struct DatasetMeta {
  SceneConfig config;
  Index count = 0;
  std::vector<std::string> seg_classes, det_classes;
  std::vector<std::pair<std::string, std::string>> checksums;  // relative path, SHA-1
  int dropped_objects = 0;
};

void to_json(nlohmann::json& j, const DatasetMeta& meta);
void from_json(const nlohmann::json& j, DatasetMeta& meta);

// Generates samples [0, count) into `dir` and returns the written meta.json.
DatasetMeta write_dataset(const std::filesystem::path& dir, const SceneConfig& cfg, Index count);

struct Dataset {
  DatasetMeta meta;
  std::vector<Sample> samples;
};

// Loads every sample listed in meta.json; with verify, checksums must match.
Dataset load_dataset(const std::filesystem::path& dir, bool verify = false);
// First `limit` samples only (all when limit <= 0).
Dataset load_dataset_prefix(const std::filesystem::path& dir, Index limit, bool verify = false);

// KITTI object label: 15 whitespace-separated fields.
struct KittiLabel {
  std::string type;
  double truncated = 0;
  int occluded = 0;
  double alpha = 0;
  Box box;                               // pixels
  std::array<double, 3> dimensions{};    // height, width, length (m)
  std::array<double, 3> location{};      // x, y, z (m)
  double rotation_y = 0;

  bool dont_care() const { return type == "DontCare"; }
  bool operator==(const KittiLabel&) const = default;
};

class LabelParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

KittiLabel parse_kitti_label(std::string_view line);
std::string emit_kitti_label(const KittiLabel& label);
std::vector<KittiLabel> parse_kitti_file(std::string_view text);

// Detection targets from KITTI labels: DontCare and unmapped types are
// skipped, boxes are clipped to the image and dropped if under 1 px.
std::vector<GtBox> kitti_to_targets(const std::vector<KittiLabel>& labels,
                                    const std::vector<std::string>& class_names, Index image_w,
                                    Index image_h);

}  // namespace mtlnet
