#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hsd/detector.hpp"
#include "hsd/head.hpp"

namespace hsd {

inline constexpr int64_t kFaultClass = 1;

// m fault images, n normal images, b normal -> predicted fault, d fault -> predicted normal.
struct ConfusionCounts {
  int64_t m = 0;
  int64_t n = 0;
  int64_t b = 0;
  int64_t d = 0;

  int64_t total() const { return m + n; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

// Exact rate num/den.
struct Rational {
  int64_t num = 0;
  int64_t den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

struct DatasetMetrics {
  std::string name;
  ConfusionCounts counts;
  Rational cdr, mdr, fdr;  // mdr: missed faults, fdr: false alarms
};

struct MetricReport {
  std::vector<DatasetMetrics> datasets;
  double mcdr = 0, mmdr = 0, mfdr = 0;  // unweighted means over datasets
};

// True iff some fault-class detection scores >= threshold.
bool image_fault_decision(const std::vector<Detection>& detections, double score_threshold = 0.3);

// decisions: (predicted_fault, actual_fault). Throws ValidationError when empty.
DatasetMetrics compute_metrics(const std::vector<std::pair<bool, bool>>& decisions, const std::string& name = "test");
DatasetMetrics metrics_from_counts(const ConfusionCounts& c, const std::string& name = "test");
MetricReport aggregate(const std::vector<DatasetMetrics>& datasets);

struct InferenceBenchmark {
  double seconds_per_image = 0;
  int64_t peak_memory_bytes = 0;
  std::string hardware;
  int64_t trials = 0;
};

double median(std::vector<double> values);

// Median per-image wall clock over `trials` timed passes after `warmup` passes.
InferenceBenchmark benchmark_inference(DetectorImpl& model, const torch::Tensor& images, int64_t warmup,
                                       int64_t trials);

std::string hardware_string();
int64_t peak_rss_bytes();

nlohmann::json to_json(const MetricReport& r);
// Columns: mCDR mMDR mFDR memory inference model-size.
std::string format_table(const MetricReport& r, const InferenceBenchmark* bench = nullptr,
                         int64_t model_size_bytes = -1);

extern const char* const kMethodologyNote;

}  // namespace hsd
