#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hsd/config.hpp"
#include "hsd/data_io.hpp"

namespace hsd {

// single: one model (cfg.student) trained alone; distill: teacher phase then student phase.
enum class RunKind { single, distill };

struct AblationRun {
  std::string label;
  RunKind kind = RunKind::distill;
  DistillConfig cfg;
};

struct AblationRow {
  std::string label;
  std::string fingerprint;
  double cdr = 0, mdr = 0, fdr = 0;
  int64_t params = 0;
  double wall_clock_seconds = 0;
  std::string status = "ok";  // or "failed: <reason>"
};

// Neck variants in table order, each a single-model run.
std::vector<AblationRun> neck_grid(const DistillConfig& base);
// HKN off/on x HKH off/on. HKN off: plain top-down neck (no FCA, standard 3x3 smoothing).
// HKH off: no distillation term and no distribution loss.
std::vector<AblationRun> component_grid(const DistillConfig& base);
std::vector<AblationRun> tau_grid(const DistillConfig& base, const std::vector<double>& taus = {1, 5, 10, 15, 20});

// Runs in order; a failed run is recorded and the rest proceed. Teachers are shared between
// runs whose teacher phase is identical.
std::vector<AblationRow> run_ablation(const std::vector<AblationRun>& grid, const std::vector<AnnotatedImage>& train,
                                      const std::vector<AnnotatedImage>& test, const DatasetStats& stats,
                                      std::ostream* progress = nullptr);

inline constexpr const char* kAblationHeader = "label,fingerprint,CDR,MDR,FDR,params,wall_clock_s,status";
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
std::string format_ablation_row(const AblationRow& r);

}  // namespace hsd
