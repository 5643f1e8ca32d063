#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hsd/checkpoint.hpp"
#include "hsd/config.hpp"
#include "hsd/data_io.hpp"
#include "hsd/detector.hpp"
#include "hsd/losses.hpp"
#include "hsd/metrics.hpp"

namespace hsd {

// HSD_DETERMINISTIC=1: single intra-op thread and deterministic kernels. Returns whether it was set.
bool apply_determinism_from_env();

// Weights drawn from a generator seeded with `seed`.
Detector build_detector(const DetectorSpec& spec, int64_t seed);

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  double lr = 0;
  int64_t iterations = 0;
  LossBundle mean;
};

struct TrainOptions {
  std::filesystem::path out_dir;          // empty: nothing written
  std::optional<std::filesystem::path> resume_from;  // epoch-boundary state checkpoint
  std::ostream* progress = nullptr;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<LossBundle> iterations;
  std::vector<double> lr_trace;  // one entry per epoch
  std::string teacher_hash_before;
  std::string teacher_hash_after;
  int64_t clamped_targets = 0;
  double wall_clock_seconds = 0;
};

struct TrainResult {
  Detector model{nullptr};
  TrainReport report;
};

// Single-model phase: total loss with the distillation term off.
TrainResult train_teacher(const DistillConfig& cfg, const std::vector<AnnotatedImage>& train_set,
                          const DatasetStats& stats, const TrainOptions& opts = {});

// Student phase against a frozen teacher. With schedule.distill = false the hkd term is dropped
// (the no-distillation baseline on the same student architecture).
TrainResult train_student(const DistillConfig& cfg, const std::vector<AnnotatedImage>& train_set,
                          const DatasetStats& stats, Detector teacher, const TrainOptions& opts = {});

struct EvalResult {
  DatasetMetrics metrics;
  std::vector<std::vector<Detection>> detections;
};

EvalResult evaluate(DetectorImpl& model, const std::vector<AnnotatedImage>& samples, const DatasetStats& stats,
                    const DataConfig& data, const std::string& name = "test", int64_t batch_size = 8);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossBundle>& rows);
void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& rows);

}  // namespace hsd
