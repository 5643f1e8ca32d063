#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "hsd/ablation.hpp"
#include "hsd/checkpoint.hpp"
#include "hsd/config.hpp"
#include "hsd/data_io.hpp"
#include "hsd/errors.hpp"
#include "hsd/metrics.hpp"
#include "hsd/plot.hpp"
#include "hsd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

struct ConfigArgs {
  std::string config;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  std::string data;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config, "TOML config file");
  cmd->add_option("--preset", a.preset, "desk | paper (when no --config)");
  cmd->add_option("--set", a.overrides, "override section.key=value (repeatable, last wins)");
  cmd->add_option("--data", a.data, "dataset root (overrides data.root)");
}

hsd::DistillConfig resolve_config(const ConfigArgs& a) {
  auto cfg = a.config.empty() ? hsd::preset_config(a.preset, a.overrides) : hsd::load_config(a.config, a.overrides);
  if (!a.data.empty()) cfg.data.root = a.data;
  if (cfg.data.root.empty()) throw hsd::ValidationError("no dataset root: pass --data or set data.root");
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

void write_result(const fs::path& out, const std::string& command, json body) {
  body["schema_version"] = kSchemaVersion;
  body["command"] = command;
  body["status"] = "ok";
  write_text(out / "result.json", body.dump(2) + "\n");
}

json metrics_json(const hsd::DatasetMetrics& m) { return hsd::to_json(hsd::aggregate({m})); }

void save_training_outputs(const fs::path& out, hsd::TrainResult& r, const std::string& ckpt_name,
                           const json& extra) {
  hsd::write_loss_csv(out / "loss.csv", r.report.iterations);
  hsd::write_epoch_csv(out / "epochs.csv", r.report.epochs);
  hsd::write_checkpoint(out / ckpt_name, hsd::make_checkpoint(*r.model, extra));
}

json lr_trace_json(const hsd::TrainReport& rep) { return rep.lr_trace; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous self-distillation fault detection tools"};
  app.require_subcommand(1);
  fs::path out_dir;

  // gen-data
  hsd::SyntheticSpec syn;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic fault dataset");
  gen->add_option("--out", gen_out, "output dataset root")->required();
  gen->add_option("--seed", syn.seed);
  gen->add_option("--num-train", syn.num_train);
  gen->add_option("--num-test", syn.num_test);
  gen->add_option("--height", syn.image_height);
  gen->add_option("--width", syn.image_width);
  gen->add_option("--fault-ratio", syn.fault_ratio);
  gen->add_option("--clutter", syn.clutter_level);
  gen->add_option("--occlusion", syn.occlusion_prob);

  // train-teacher
  ConfigArgs teach_args;
  std::string teach_out;
  auto* teach = app.add_subcommand("train-teacher", "train the teacher (no distillation term)");
  add_config_args(teach, teach_args);
  teach->add_option("--out", teach_out, "run directory")->required();

  // distill
  ConfigArgs dist_args;
  std::string dist_out, teacher_ckpt;
  auto* dist = app.add_subcommand("distill", "train the student against a frozen teacher");
  add_config_args(dist, dist_args);
  dist->add_option("--out", dist_out, "run directory")->required();
  dist->add_option("--teacher-checkpoint", teacher_ckpt, "teacher checkpoint file");

  // eval
  std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
  double eval_threshold = 0.3;
  int64_t bench_trials = 5;
  auto* ev = app.add_subcommand("eval", "image-level CDR/MDR/FDR of a checkpoint");
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--data", eval_data)->required();
  ev->add_option("--split", eval_split);
  ev->add_option("--out", eval_out)->required();
  ev->add_option("--threshold", eval_threshold, "fault decision score threshold");
  ev->add_option("--bench-trials", bench_trials);

  // ablate
  ConfigArgs abl_args;
  std::string abl_out, grid = "tau";
  auto* abl = app.add_subcommand("ablate", "run an ablation grid");
  add_config_args(abl, abl_args);
  abl->add_option("--grid", grid)->check(CLI::IsMember({"neck", "components", "tau"}));
  abl->add_option("--out", abl_out)->required();

  // plot-loss
  std::vector<std::string> csvs;
  std::string plot_out;
  auto* plot = app.add_subcommand("plot-loss", "render loss curves (one panel per component)");
  plot->add_option("--csv", csvs, "loss CSV (repeat to overlay runs)")->required();
  plot->add_option("--out", plot_out, "output PNG")->required();

  // inspect-model
  ConfigArgs insp_args;
  std::string insp_ckpt, insp_which = "student";
  auto* insp = app.add_subcommand("inspect-model", "parameter counts per module");
  add_config_args(insp, insp_args);
  insp->add_option("--checkpoint", insp_ckpt);
  insp->add_option("--which", insp_which)->check(CLI::IsMember({"teacher", "student"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    hsd::apply_determinism_from_env();
    if (*gen) {
      out_dir = gen_out;
      auto rep = hsd::generate_synthetic(syn, out_dir);
      json cfg{{"seed", syn.seed},
               {"num_train", syn.num_train},
               {"num_test", syn.num_test},
               {"image_height", syn.image_height},
               {"image_width", syn.image_width},
               {"fault_ratio", syn.fault_ratio},
               {"clutter_level", syn.clutter_level},
               {"occlusion_prob", syn.occlusion_prob}};
      write_text(out_dir / "effective_config.json", cfg.dump(2) + "\n");
      write_result(out_dir, "gen-data",
                   {{"train", {{"fault", rep.train.fault}, {"normal", rep.train.normal}}},
                    {"test", {{"fault", rep.test.fault}, {"normal", rep.test.normal}}}});
      std::cout << "wrote " << rep.train.fault + rep.train.normal << " train and "
                << rep.test.fault + rep.test.normal << " test images to " << out_dir << "\n";
    } else if (*teach) {
      out_dir = teach_out;
      auto cfg = resolve_config(teach_args);
      fs::create_directories(out_dir);
      write_text(out_dir / "effective_config.toml", hsd::to_toml(cfg));
      auto train = hsd::load_dataset(cfg.data.root, "train");
      auto test = hsd::load_dataset(cfg.data.root, "test");
      auto stats = hsd::load_or_compute_stats(cfg.data.root);
      hsd::TrainOptions opts;
      opts.out_dir = out_dir;
      opts.progress = &std::cout;
      auto r = hsd::train_teacher(cfg, train, stats, opts);
      auto ev_res = hsd::evaluate(*r.model, test, stats, cfg.data);
      auto mj = metrics_json(ev_res.metrics);
      save_training_outputs(out_dir, r, "teacher.ckpt", {{"config", hsd::config_fingerprint(cfg)}, {"metrics", mj}});
      write_text(out_dir / "metrics.json", mj.dump(2) + "\n");
      write_result(out_dir, "train-teacher",
                   {{"checkpoint", (out_dir / "teacher.ckpt").string()},
                    {"metrics", mj},
                    {"lr_trace", lr_trace_json(r.report)},
                    {"params", hsd::count_parameters(*r.model).total_params}});
      std::cout << hsd::format_table(hsd::aggregate({ev_res.metrics}));
    } else if (*dist) {
      if (teacher_ckpt.empty()) throw hsd::ValidationError("distill requires --teacher-checkpoint");
      out_dir = dist_out;
      auto cfg = resolve_config(dist_args);
      fs::create_directories(out_dir);
      write_text(out_dir / "effective_config.toml", hsd::to_toml(cfg));
      auto teacher = hsd::load_detector(fs::path(teacher_ckpt));
      auto train = hsd::load_dataset(cfg.data.root, "train");
      auto test = hsd::load_dataset(cfg.data.root, "test");
      auto stats = hsd::load_or_compute_stats(cfg.data.root);
      hsd::TrainOptions opts;
      opts.out_dir = out_dir;
      opts.progress = &std::cout;
      auto r = hsd::train_student(cfg, train, stats, teacher, opts);
      auto ev_res = hsd::evaluate(*r.model, test, stats, cfg.data);
      auto mj = metrics_json(ev_res.metrics);
      save_training_outputs(out_dir, r, "student.ckpt", {{"config", hsd::config_fingerprint(cfg)}, {"metrics", mj}});
      write_text(out_dir / "metrics.json", mj.dump(2) + "\n");
      write_result(out_dir, "distill",
                   {{"checkpoint", (out_dir / "student.ckpt").string()},
                    {"metrics", mj},
                    {"teacher_hash_before", r.report.teacher_hash_before},
                    {"teacher_hash_after", r.report.teacher_hash_after},
                    {"lr_trace", lr_trace_json(r.report)},
                    {"params", hsd::count_parameters(*r.model).total_params}});
      std::cout << hsd::format_table(hsd::aggregate({ev_res.metrics}));
    } else if (*ev) {
      out_dir = eval_out;
      fs::create_directories(out_dir);
      auto ckpt = hsd::read_checkpoint(eval_ckpt);
      auto model = hsd::load_detector(ckpt);
      auto cfg = hsd::DistillConfig::desk();
      cfg.data.root = eval_data;
      cfg.data.decision_threshold = eval_threshold;
      auto samples = hsd::load_dataset(eval_data, eval_split);
      auto stats = hsd::load_or_compute_stats(eval_data);
      cfg.data.image_height = samples.front().pixels.rows;
      cfg.data.image_width = samples.front().pixels.cols;
      write_text(out_dir / "effective_config.json",
                 json{{"checkpoint", eval_ckpt}, {"data", eval_data}, {"split", eval_split},
                      {"threshold", eval_threshold}}
                         .dump(2) +
                     "\n");
      auto res = hsd::evaluate(*model, samples, stats, cfg.data, eval_split);
      std::ofstream det(out_dir / "detections.jsonl");
      for (size_t i = 0; i < samples.size(); ++i) hsd::write_detections_jsonl(det, samples[i].image_id, res.detections[i]);
      auto report = hsd::aggregate({res.metrics});
      hsd::PreprocessOptions popts;
      popts.target_height = cfg.data.image_height;
      popts.target_width = cfg.data.image_width;
      std::mt19937_64 rng(0);
      auto one = hsd::preprocess(samples.front(), false, stats, popts, rng).image.unsqueeze(0);
      auto bench = hsd::benchmark_inference(*model, one, 1, bench_trials);
      const auto size = hsd::count_parameters(*model).model_size_bytes;
      auto mj = hsd::to_json(report);
      write_text(out_dir / "metrics.json", mj.dump(2) + "\n");
      const auto table = hsd::format_table(report, &bench, size);
      write_text(out_dir / "metrics_table.txt", table);
      write_result(out_dir, "eval",
                   {{"metrics", mj},
                    {"inference_seconds_per_image", bench.seconds_per_image},
                    {"peak_memory_bytes", bench.peak_memory_bytes},
                    {"hardware", bench.hardware},
                    {"model_size_bytes", size}});
      std::cout << table;
    } else if (*abl) {
      out_dir = abl_out;
      auto cfg = resolve_config(abl_args);
      fs::create_directories(out_dir);
      write_text(out_dir / "effective_config.toml", hsd::to_toml(cfg));
      auto train = hsd::load_dataset(cfg.data.root, "train");
      auto test = hsd::load_dataset(cfg.data.root, "test");
      auto stats = hsd::load_or_compute_stats(cfg.data.root);
      std::vector<hsd::AblationRun> runs = grid == "neck"         ? hsd::neck_grid(cfg)
                                           : grid == "components" ? hsd::component_grid(cfg)
                                                                  : hsd::tau_grid(cfg);
      std::cout << hsd::kAblationHeader << "\n";
      auto rows = hsd::run_ablation(runs, train, test, stats, &std::cout);
      const auto csv = out_dir / ("ablation_" + grid + ".csv");
      hsd::write_ablation_csv(csv, rows);
      json jr = json::array();
      for (const auto& r : rows) {
        jr.push_back({{"label", r.label}, {"fingerprint", r.fingerprint}, {"CDR", r.cdr}, {"MDR", r.mdr},
                      {"FDR", r.fdr}, {"params", r.params}, {"status", r.status}});
      }
      write_result(out_dir, "ablate", {{"grid", grid}, {"csv", csv.string()}, {"rows", jr}});
    } else if (*plot) {
      std::vector<fs::path> paths(csvs.begin(), csvs.end());
      hsd::plot_loss(paths, plot_out);
      out_dir = fs::path(plot_out).parent_path();
      if (out_dir.empty()) out_dir = ".";
      write_text(out_dir / "plot_config.json", json{{"csv", csvs}, {"out", plot_out}}.dump(2) + "\n");
      json body{{"image", plot_out}, {"schema_version", kSchemaVersion}, {"command", "plot-loss"}, {"status", "ok"}};
      write_text(out_dir / "plot_result.json", body.dump(2) + "\n");
    } else if (*insp) {
      hsd::Detector model{nullptr};
      if (!insp_ckpt.empty()) {
        model = hsd::load_detector(fs::path(insp_ckpt));
      } else {
        auto ov = insp_args.overrides;
        auto cfg = insp_args.config.empty() ? hsd::preset_config(insp_args.preset, ov)
                                            : hsd::load_config(insp_args.config, ov);
        model = hsd::Detector(insp_which == "teacher" ? cfg.teacher : cfg.student);
      }
      json j = hsd::count_parameters(*model);
      j["fingerprint"] = hsd::architecture_fingerprint(*model);
      j["spec"] = model->spec();
      std::cout << j.dump(2) << "\n";
    }
  } catch (const hsd::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const hsd::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    if (!out_dir.empty()) {
      std::error_code ec;
      fs::create_directories(out_dir, ec);
      const auto dump = out_dir / "failure.json";
      std::ofstream os(dump);
      os << json{{"schema_version", kSchemaVersion}, {"status", "failed"}, {"error", e.what()},
                 {"state_checkpoint", fs::exists(out_dir / "crash_state.ckpt")
                                          ? (out_dir / "crash_state.ckpt").string()
                                          : std::string{}}}
                .dump(2)
         << "\n";
      std::cerr << "state dump: " << dump.string() << "\n";
    }
    return 2;
  }
  return 0;
}
