#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "hsd/core_nn.hpp"
#include "hsd/neck.hpp"

namespace hsd {

// Dense head hyper-parameters. Edge distances are in stride units and discretized
// into `bins` uniform sub-intervals of [eps_min, eps_max], i.e. bins + 1 points.
struct HeadSpec {
  int64_t num_classes = 2;
  int64_t in_channels = 64;
  int64_t stacked_convs = 2;
  int64_t bins = 16;
  double eps_min = 0.0;
  double eps_max = 16.0;
  int64_t norm_groups = 8;
  double prior_prob = 0.01;

  void validate() const;
  double bin_width() const { return (eps_max - eps_min) / static_cast<double>(bins); }
  int64_t points() const { return bins + 1; }
  bool operator==(const HeadSpec&) const = default;
};

// eps_0 .. eps_n as a 1-D tensor.
torch::Tensor bin_points(const HeadSpec& spec, torch::TensorOptions opts = torch::kFloat32);

struct HeadOutput {
  torch::Tensor class_logits;  // N, L, C
  torch::Tensor edge_logits;   // N, L, 4, n+1   edge order (t, b, l, r)
  torch::Tensor locations;     // L, 2           (x, y) pixel centres
  torch::Tensor strides;       // L
  std::vector<int64_t> level_sizes;

  torch::Tensor class_scores() const { return class_logits.sigmoid(); }
};

// Pixel centres (j*s + s/2, i*s + s/2) of every cell of every level, row-major per level.
std::pair<torch::Tensor, torch::Tensor> level_locations(const std::vector<std::pair<int64_t, int64_t>>& sizes,
                                                        const std::vector<int64_t>& strides);

class HeadImpl : public torch::nn::Module {
 public:
  HeadImpl(const HeadSpec& spec, int64_t num_levels);

  HeadOutput forward(const PyramidFeatures& pyramid);

  // Raw (cls, reg) maps of one level. The per-level scale is applied to reg only when `apply_scale`.
  std::pair<torch::Tensor, torch::Tensor> forward_level(const torch::Tensor& x, int64_t level, bool apply_scale = true);

  const HeadSpec& spec() const { return spec_; }

  torch::nn::Sequential cls_tower{nullptr};
  torch::nn::Sequential reg_tower{nullptr};
  torch::nn::Conv2d cls_out{nullptr};
  torch::nn::Conv2d reg_out{nullptr};
  torch::Tensor scales;  // one learnable scalar per level

 private:
  HeadSpec spec_;
  int64_t num_levels_;
};
TORCH_MODULE(Head);

// Per-edge expectation sum_i softmax(logits)_i * eps_i. logits (..., 4, n+1) -> (..., 4).
torch::Tensor distribution_expectation(const torch::Tensor& edge_logits, const HeadSpec& spec);

// distances (..., 4) in stride units, edge order (t, b, l, r) -> boxes (..., 4) as (x1, y1, x2, y2).
// When image_hw is given, boxes are clipped to [0, W] x [0, H].
torch::Tensor decode_boxes(const torch::Tensor& locations, const torch::Tensor& strides,
                           const torch::Tensor& distances,
                           std::optional<std::pair<int64_t, int64_t>> image_hw = std::nullopt);

// Inverse of decode_boxes (no clamping to the bin range).
torch::Tensor encode_boxes(const torch::Tensor& locations, const torch::Tensor& strides, const torch::Tensor& boxes);

// Aligned IoU of two (..., 4) box tensors. Degenerate boxes have zero area.
torch::Tensor aligned_iou(const torch::Tensor& a, const torch::Tensor& b);

// Pairwise IoU matrix (A, B).
torch::Tensor pairwise_iou(const torch::Tensor& a, const torch::Tensor& b);

struct Assignment {
  torch::Tensor labels;       // L int64, class id or -1 for negative
  torch::Tensor gt_index;     // L int64, matched gt or -1
  torch::Tensor target_boxes; // L, 4 (zeros at negatives)

  torch::Tensor positive_mask() const { return labels.ge(0); }
  int64_t num_positives() const { return labels.ge(0).sum().item<int64_t>(); }
};

struct AssignOptions {
  double center_radius = 1.5;  // in strides
  // Per-level [lo, hi] range of the max edge distance, pixels. Empty = derived from strides
  // (8: [0,64], 16: [64,128], 32: [128,256], 64: [256,512], 128: [512,inf)); the last level is open-ended.
  std::vector<std::pair<double, double>> ranges;
};

std::vector<std::pair<double, double>> default_level_ranges(const std::vector<int64_t>& level_strides);

// FCOS-style centre sampling with per-level scale ranges; ties go to the smallest box.
// gt_boxes (G, 4) float, gt_labels (G) int64. G may be 0.
Assignment assign_targets(const torch::Tensor& locations, const torch::Tensor& strides,
                          const std::vector<int64_t>& level_sizes, const std::vector<int64_t>& level_strides,
                          const torch::Tensor& gt_boxes, const torch::Tensor& gt_labels,
                          const AssignOptions& opts = {});

struct Detection {
  std::array<float, 4> box{};  // x1, y1, x2, y2
  int64_t class_id = 0;
  float score = 0.f;
};

struct PostprocessOptions {
  double score_threshold = 0.05;
  double nms_iou = 0.6;
  int64_t top_k = 100;
};

// Threshold -> per-class greedy NMS -> top-k by score. scores (L, C) in [0,1], boxes (L, 4).
std::vector<Detection> postprocess(const torch::Tensor& scores, const torch::Tensor& boxes,
                                   const PostprocessOptions& opts = {});

// One JSON object per line: {"image_id", "box", "class", "score"}.
void write_detections_jsonl(std::ostream& os, const std::string& image_id, const std::vector<Detection>& dets);

}  // namespace hsd
