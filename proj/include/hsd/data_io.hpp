#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace hsd {

// Synthetic class scheme.
inline constexpr int64_t kComponentPresent = 0;
inline constexpr int64_t kComponentMissing = 1;  // fault class
inline const std::array<std::string, 2> kClassNames = {"component_present", "component_missing"};

struct BoxLabel {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int64_t class_id = 0;
  bool operator==(const BoxLabel&) const = default;
};

struct AnnotatedImage {
  std::string image_id;
  cv::Mat pixels;  // H x W x 3, 8-bit, BGR as stored by the image codec
  std::vector<BoxLabel> boxes;
  bool image_fault_flag = false;
};

bool has_fault(const std::vector<BoxLabel>& boxes);

// <root>/annotations/instances_<split>.json (COCO-style) + <root>/images/<split>/<file_name>.
// Throws DataError naming the missing file or the offending record index.
std::vector<AnnotatedImage> load_dataset(const std::filesystem::path& root, const std::string& split);

std::filesystem::path annotation_path(const std::filesystem::path& root, const std::string& split);

struct SyntheticSpec {
  int64_t num_train = 300;
  int64_t num_test = 100;
  int64_t image_height = 256;
  int64_t image_width = 256;
  double fault_ratio = 0.5;
  int64_t clutter_level = 4;     // distractor shapes per image
  double occlusion_prob = 0.2;   // per fixture
  int64_t seed = 7;
  // Slot box side as a fraction of min(H, W), and allowed aspect (w/h) band.
  double min_box_frac = 0.09;
  double max_box_frac = 0.22;
  double min_aspect = 0.6;
  double max_aspect = 1.6;

  void validate() const;
};

struct SplitCounts {
  int64_t fault = 0;
  int64_t normal = 0;
};

struct GenerationReport {
  SplitCounts train;
  SplitCounts test;
};

// Scenes of bracket fixtures whose key part is present (class 0) or missing (class 1, an empty slot),
// with distractor shapes and partial occluders. Deterministic in spec.seed.
GenerationReport generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

struct AnnotationAudit {
  int64_t num_boxes = 0;
  double mean_width = 0, mean_height = 0;
  double min_side = 0, max_side = 0;
  double min_aspect = 0, max_aspect = 0;
  // every box inside the configured side/aspect band
  bool within(const SyntheticSpec& spec) const;
};

AnnotationAudit audit_annotations(const std::vector<AnnotatedImage>& samples);

struct DatasetStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

DatasetStats compute_stats(const std::vector<AnnotatedImage>& samples);
// Sidecar <root>/stats.json, computed from the train split on first use.
DatasetStats load_or_compute_stats(const std::filesystem::path& root);

struct Preprocessed {
  torch::Tensor image;  // 3, H', W' float32; H', W' padded to a multiple of pad_multiple
  std::vector<BoxLabel> boxes;
  bool flipped = false;
};

struct PreprocessOptions {
  int64_t target_height = 256;
  int64_t target_width = 256;
  int64_t pad_multiple = 32;
  double flip_prob = 0.5;
};

// Resize (aspect-distorting) -> per-channel normalisation -> [train only] horizontal flip -> zero pad.
Preprocessed preprocess(const AnnotatedImage& sample, bool train_mode, const DatasetStats& stats,
                        const PreprocessOptions& opts, std::mt19937_64& rng);

// x' = W - x on both edges.
std::vector<BoxLabel> hflip_boxes(const std::vector<BoxLabel>& boxes, double width);

}  // namespace hsd
