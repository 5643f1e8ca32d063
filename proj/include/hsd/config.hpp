#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hsd/detector.hpp"
#include "hsd/losses.hpp"

namespace hsd {

struct ScheduleConfig {
  int64_t epochs = 12;
  int64_t batch_size = 4;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::vector<int64_t> lr_decay_epochs = {8, 11};
  double lr_decay_factor = 0.1;
  double grad_clip = 35.0;  // global L2 norm; <= 0 disables
  int64_t seed = 0;
  int64_t max_iterations = 0;  // 0 = run every epoch to completion
  bool warm_start = false;     // initialise the student from the teacher weights
  bool distill = true;         // false: single-model (teacher-phase) run

  // Learning rate in effect during 1-based `epoch`: lr * factor^(#decay epochs <= epoch).
  double lr_at_epoch(int64_t epoch) const;
};

struct DataConfig {
  std::string root;
  int64_t image_height = 256;
  int64_t image_width = 256;
  double flip_prob = 0.5;
  double decision_threshold = 0.3;  // image-level fault decision
  double score_threshold = 0.05;    // postprocess
  double nms_iou = 0.6;
};

struct DistillConfig {
  std::string preset = "desk";
  DetectorSpec teacher;
  DetectorSpec student;
  LossWeights weights;
  ScheduleConfig schedule;
  DataConfig data;

  // Throws ValidationError. Teacher and student heads must share bins and range.
  void validate() const;

  // Desk scale: 256x256, desk backbone, lr 1e-2.
  static DistillConfig desk();
  // 12 epochs, batch 4, SGD lr 1e-4 momentum 0.9 wd 1e-5, /10 at epochs 8 and 11, 512x700 input.
  static DistillConfig paper();
};

// TOML with sections [teacher] [student] [loss] [schedule] [data]; top-level `preset` picks the base.
DistillConfig parse_config(const std::string& toml_text, const std::vector<std::string>& overrides = {});
DistillConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
// Preset defaults plus overrides ("section.key=value", last wins).
DistillConfig preset_config(const std::string& preset, const std::vector<std::string>& overrides = {});

std::string to_toml(const DistillConfig& cfg);
// Stable short hash of the effective config.
std::string config_fingerprint(const DistillConfig& cfg);

}  // namespace hsd
