#include "hsd/ablation.hpp"

#include "hsd/errors.hpp"
#include "hsd/trainer.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <ostream>

namespace hsd {

std::vector<AblationRun> neck_grid(const DistillConfig& base) {
  std::vector<AblationRun> runs;
  for (const auto& neck : neck_ablation_variants(base.student.neck)) {
    AblationRun r;
    r.label = neck.label();
    r.kind = RunKind::single;
    r.cfg = base;
    r.cfg.student.neck = neck;
    r.cfg.schedule.distill = false;
    runs.push_back(r);
  }
  return runs;
}

std::vector<AblationRun> component_grid(const DistillConfig& base) {
  std::vector<AblationRun> runs;
  for (bool hkn : {false, true}) {
    for (bool hkh : {false, true}) {
      AblationRun r;
      r.label = std::string("HKN ") + (hkn ? "on" : "off") + " / HKH " + (hkh ? "on" : "off");
      r.cfg = base;
      if (!hkn) {
        r.cfg.student.neck.fca_enabled = false;
        r.cfg.student.neck.smoothing = Smoothing::standard_k3;
      }
      if (hkh) {
        r.kind = RunKind::distill;
        r.cfg.schedule.distill = true;
      } else {
        r.kind = RunKind::single;
        r.cfg.schedule.distill = false;
        r.cfg.weights.hkd_weight = 0.0;
        r.cfg.weights.lambda1 = 0.0;
      }
      runs.push_back(r);
    }
  }
  return runs;
}

std::vector<AblationRun> tau_grid(const DistillConfig& base, const std::vector<double>& taus) {
  std::vector<AblationRun> runs;
  for (double tau : taus) {
    AblationRun r;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "tau=%g", tau);
    r.label = buf;
    r.kind = RunKind::distill;
    r.cfg = base;
    r.cfg.weights.tau = tau;
    r.cfg.schedule.distill = true;
    runs.push_back(r);
  }
  return runs;
}

namespace {

// Everything the teacher phase depends on.
std::string teacher_key(const DistillConfig& cfg) {
  auto c = DistillConfig::desk();
  c.preset = cfg.preset;
  c.teacher = cfg.teacher;
  c.student = cfg.teacher;
  c.schedule = cfg.schedule;
  c.schedule.distill = false;
  c.schedule.warm_start = false;
  c.data = cfg.data;
  c.weights = cfg.weights;
  c.weights.tau = 1.0;
  c.weights.hkd_weight = 0.0;
  return config_fingerprint(c);
}

}  // namespace

std::vector<AblationRow> run_ablation(const std::vector<AblationRun>& grid, const std::vector<AnnotatedImage>& train,
                                      const std::vector<AnnotatedImage>& test, const DatasetStats& stats,
                                      std::ostream* progress) {
  if (grid.empty()) throw ValidationError("run_ablation: empty grid");
  std::map<std::string, Detector> teachers;
  std::vector<AblationRow> rows;
  for (const auto& run : grid) {
    AblationRow row;
    row.label = run.label;
    row.fingerprint = config_fingerprint(run.cfg);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Detector model{nullptr};
      if (run.kind == RunKind::single) {
        auto c = run.cfg;
        c.teacher = c.student;
        model = train_teacher(c, train, stats).model;
      } else {
        const auto key = teacher_key(run.cfg);
        auto it = teachers.find(key);
        if (it == teachers.end()) {
          auto c = run.cfg;
          c.weights.hkd_weight = 0.0;
          it = teachers.emplace(key, train_teacher(c, train, stats).model).first;
        }
        model = train_student(run.cfg, train, stats, it->second).model;
      }
      auto ev = evaluate(*model, test, stats, run.cfg.data);
      row.cdr = ev.metrics.cdr.value();
      row.mdr = ev.metrics.mdr.value();
      row.fdr = ev.metrics.fdr.value();
      row.params = count_parameters(*model).total_params;
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
    }
    row.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress) *progress << format_ablation_row(row) << '\n' << std::flush;
    rows.push_back(row);
  }
  return rows;
}

std::string format_ablation_row(const AblationRow& r) {
  std::string status = r.status;
  for (auto& ch : status)
    if (ch == ',' || ch == '\n') ch = ';';
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%lld,%.3f,", r.cdr, r.mdr, r.fdr, static_cast<long long>(r.params),
                r.wall_clock_seconds);
  return "\"" + r.label + "\"," + r.fingerprint + "," + buf + status;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << kAblationHeader << '\n';
  for (const auto& r : rows) os << format_ablation_row(r) << '\n';
}

}  // namespace hsd
