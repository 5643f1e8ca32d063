#include "hsd/metrics.hpp"

#include "hsd/errors.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

namespace hsd {

const char* const kMethodologyNote =
    "MDR counts fault images predicted normal (missed); FDR counts normal images predicted fault (false alarm). "
    "The source formula prints these two numerators the other way round; CDR is the same under either reading.";

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  m += o.m;
  n += o.n;
  b += o.b;
  d += o.d;
  return *this;
}

bool image_fault_decision(const std::vector<Detection>& detections, double score_threshold) {
  return std::any_of(detections.begin(), detections.end(), [&](const Detection& det) {
    return det.class_id == kFaultClass && det.score >= score_threshold;
  });
}

DatasetMetrics metrics_from_counts(const ConfusionCounts& c, const std::string& name) {
  if (c.total() <= 0) throw ValidationError("compute_metrics: no images");
  if (c.b < 0 || c.d < 0 || c.b > c.n || c.d > c.m) throw ValidationError("compute_metrics: inconsistent counts");
  DatasetMetrics r;
  r.name = name;
  r.counts = c;
  const int64_t den = c.total();
  r.mdr = {c.d, den};
  r.fdr = {c.b, den};
  r.cdr = {den - c.b - c.d, den};
  return r;
}

DatasetMetrics compute_metrics(const std::vector<std::pair<bool, bool>>& decisions, const std::string& name) {
  if (decisions.empty()) throw ValidationError("compute_metrics: decision list is empty");
  ConfusionCounts c;
  for (const auto& [pred, actual] : decisions) {
    if (actual) {
      ++c.m;
      if (!pred) ++c.d;
    } else {
      ++c.n;
      if (pred) ++c.b;
    }
  }
  return metrics_from_counts(c, name);
}

MetricReport aggregate(const std::vector<DatasetMetrics>& datasets) {
  if (datasets.empty()) throw ValidationError("aggregate: no datasets");
  MetricReport r;
  r.datasets = datasets;
  for (const auto& d : datasets) {
    r.mcdr += d.cdr.value();
    r.mmdr += d.mdr.value();
    r.mfdr += d.fdr.value();
  }
  const double k = static_cast<double>(datasets.size());
  r.mcdr /= k;
  r.mmdr /= k;
  r.mfdr /= k;
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ValidationError("median of an empty list");
  std::sort(values.begin(), values.end());
  const size_t k = values.size();
  return k % 2 ? values[k / 2] : 0.5 * (values[k / 2 - 1] + values[k / 2]);
}

int64_t peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<int64_t>(ru.ru_maxrss) * 1024;  // KiB on Linux
}

std::string hardware_string() {
  std::string model = "unknown cpu";
  std::ifstream is("/proc/cpuinfo");
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) model = line.substr(pos + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads, torch threads " +
         std::to_string(torch::get_num_threads());
}

InferenceBenchmark benchmark_inference(DetectorImpl& model, const torch::Tensor& images, int64_t warmup,
                                       int64_t trials) {
  if (trials < 1) throw ValidationError("benchmark_inference: trials must be >= 1");
  torch::NoGradGuard no_grad;
  model.eval();
  const auto batch = static_cast<double>(images.size(0));
  for (int64_t i = 0; i < warmup; ++i) model.forward(images);
  std::vector<double> times;
  for (int64_t i = 0; i < trials; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(images);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / batch);
  }
  InferenceBenchmark b;
  b.seconds_per_image = median(times);
  b.peak_memory_bytes = peak_rss_bytes();
  b.hardware = hardware_string();
  b.trials = trials;
  return b;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : r.datasets) {
    ds.push_back({{"name", d.name},
                  {"m", d.counts.m},
                  {"n", d.counts.n},
                  {"b", d.counts.b},
                  {"d", d.counts.d},
                  {"cdr", d.cdr.value()},
                  {"mdr", d.mdr.value()},
                  {"fdr", d.fdr.value()}});
  }
  return {{"datasets", ds},
          {"mCDR", r.mcdr},
          {"mMDR", r.mmdr},
          {"mFDR", r.mfdr},
          {"methodology", kMethodologyNote}};
}

std::string format_table(const MetricReport& r, const InferenceBenchmark* bench, int64_t model_size_bytes) {
  char buf[512];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%-8s %-8s %-8s %-12s %-16s %-12s\n", "mCDR", "mMDR", "mFDR", "memory(MB)",
                "inference(s/img)", "size(MB)");
  out += buf;
  const std::string mem = bench ? std::to_string(bench->peak_memory_bytes / (1 << 20)) : "-";
  std::string inf = "-";
  if (bench) {
    char t[32];
    std::snprintf(t, sizeof(t), "%.4f", bench->seconds_per_image);
    inf = t;
  }
  std::string size = "-";
  if (model_size_bytes >= 0) {
    char t[32];
    std::snprintf(t, sizeof(t), "%.2f", static_cast<double>(model_size_bytes) / (1 << 20));
    size = t;
  }
  std::snprintf(buf, sizeof(buf), "%-8.4f %-8.4f %-8.4f %-12s %-16s %-12s\n", r.mcdr, r.mmdr, r.mfdr, mem.c_str(),
                inf.c_str(), size.c_str());
  out += buf;
  if (bench) out += "hardware: " + bench->hardware + "\n";
  return out;
}

}  // namespace hsd
