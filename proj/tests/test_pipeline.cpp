#include <doctest.h>

#include <torch/torch.h>

#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "hsd/checkpoint.hpp"
#include "hsd/config.hpp"
#include "hsd/data_io.hpp"
#include "hsd/errors.hpp"
#include "hsd/metrics.hpp"
#include "hsd/plot.hpp"
#include "hsd/trainer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace hsd;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hsd_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticSpec tiny_spec(int64_t train, int64_t test) {
  SyntheticSpec s;
  s.num_train = train;
  s.num_test = test;
  s.image_height = 128;
  s.image_width = 128;
  return s;
}

void write_fixture(const fs::path& root, const std::string& annotations) {
  fs::create_directories(root / "images" / "train");
  fs::create_directories(root / "annotations");
  cv::Mat img(40, 60, CV_8UC3, cv::Scalar(10, 20, 30));
  for (const char* name : {"a.png", "b.png", "c.png"}) cv::imwrite((root / "images" / "train" / name).string(), img);
  std::ofstream(annotation_path(root, "train")) << annotations;
}

const char* kFixture = R"({
  "images": [{"id": 1, "file_name": "a.png", "width": 60, "height": 40},
             {"id": 2, "file_name": "b.png", "width": 60, "height": 40},
             {"id": 3, "file_name": "c.png", "width": 60, "height": 40}],
  "annotations": [{"id": 1, "image_id": 1, "bbox": [5, 5, 10, 10], "category_id": 1},
                  {"id": 2, "image_id": 2, "bbox": [5, 5, 10, 10], "category_id": 0}],
  "categories": [{"id": 0, "name": "component_present"}, {"id": 1, "name": "component_missing"}]
})";

}  // namespace

TEST_CASE("dataset loading") {
  auto root = scratch("fixture");
  write_fixture(root, kFixture);
  auto ds = load_dataset(root, "train");
  REQUIRE(ds.size() == 3);
  CHECK(ds[0].image_fault_flag);
  CHECK(!ds[1].image_fault_flag);
  CHECK(!ds[2].image_fault_flag);
  CHECK((ds[0].boxes[0] == BoxLabel{5, 5, 15, 15, 1}));

  std::string missing = kFixture;
  missing.replace(missing.find("c.png"), 5, "zz.png");
  write_fixture(root, missing);
  try {
    load_dataset(root, "train");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("zz.png") != std::string::npos);
  }

  std::string inverted = kFixture;
  inverted.replace(inverted.find("[5, 5, 10, 10], \"category_id\": 0"), 14, "[5, 5, -3, 10]");
  write_fixture(root, inverted);
  try {
    load_dataset(root, "train");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("record 1") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("synthetic generation") {
  auto a = scratch("gen_a");
  auto b = scratch("gen_b");
  auto spec = tiny_spec(300, 100);
  auto rep = generate_synthetic(spec, a);
  CHECK(rep.train.fault == 150);
  CHECK(rep.train.normal == 150);
  CHECK(rep.test.fault == 50);
  CHECK(rep.test.normal == 50);

  auto train = load_dataset(a, "train");
  REQUIRE(train.size() == 300);
  for (const auto& s : train) {
    int64_t faults = 0;
    for (const auto& bx : s.boxes) faults += bx.class_id == kComponentMissing;
    CHECK(s.image_fault_flag == (faults > 0));
  }
  CHECK(audit_annotations(train).within(spec));

  auto small = tiny_spec(12, 4);
  generate_synthetic(small, b);
  auto c = scratch("gen_c");
  generate_synthetic(small, c);
  CHECK(slurp(annotation_path(b, "train")) == slurp(annotation_path(c, "train")));
  for (const auto& entry : fs::directory_iterator(b / "images" / "train")) {
    CHECK(slurp(entry.path()) == slurp(c / "images" / "train" / entry.path().filename()));
  }
  SyntheticSpec bad = small;
  bad.fault_ratio = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  for (auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("preprocessing") {
  auto boxes = std::vector<BoxLabel>{{10, 20, 30, 40, 1}};
  auto f = hflip_boxes(boxes, 100);
  CHECK((f[0] == BoxLabel{70, 20, 90, 40, 1}));
  CHECK((hflip_boxes(f, 100) == boxes));

  auto root = scratch("norm");
  generate_synthetic(tiny_spec(16, 2), root);
  auto train = load_dataset(root, "train");
  auto stats = load_or_compute_stats(root);
  CHECK(fs::exists(root / "stats.json"));
  PreprocessOptions po;
  po.target_height = po.target_width = 128;
  std::mt19937_64 rng(1);
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& s : train) {
    auto p = preprocess(s, false, stats, po, rng);
    CHECK(!p.flipped);
    CHECK((p.image.sizes() == torch::IntArrayRef({3, 128, 128})));
    for (int c = 0; c < 3; ++c) {
      sum[c] += p.image[c].sum().item<double>();
      sq[c] += p.image[c].square().sum().item<double>();
    }
    count += 128 * 128;
  }
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(std::sqrt(sq[c] / count - mean * mean) - 1.0) < 0.05);
  }

  po.flip_prob = 1.0;
  auto p = preprocess(train[0], true, stats, po, rng);
  CHECK(p.flipped);
  auto q = preprocess(train[0], false, stats, po, rng);
  CHECK((p.image - q.image.flip(2)).abs().max().item<double>() < 1e-5);

  po.target_height = 100;
  po.target_width = 140;
  CHECK((preprocess(train[0], false, stats, po, rng).image.sizes() == torch::IntArrayRef({3, 128, 160})));
  fs::remove_all(root);
}

TEST_CASE("detection rates") {
  ConfusionCounts c{8, 2, 1, 1};
  auto m = metrics_from_counts(c);
  CHECK(m.mdr.value() == doctest::Approx(0.1));
  CHECK(m.fdr.value() == doctest::Approx(0.1));
  CHECK(m.cdr.value() == doctest::Approx(0.8));
  CHECK_THROWS_AS(compute_metrics({}), ValidationError);

  std::mt19937 rng(11);
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::pair<bool, bool>> dec(1 + rng() % 40);
    for (auto& d : dec) d = {static_cast<bool>(rng() % 2), static_cast<bool>(rng() % 2)};
    auto r = compute_metrics(dec);
    CHECK(r.cdr.num + r.mdr.num + r.fdr.num == r.cdr.den);
    auto o = oracle::confusion(dec);
    CHECK(r.counts.m == o.table[1][0] + o.table[1][1]);
    CHECK(r.counts.d == o.table[1][0]);
    CHECK(r.counts.b == o.table[0][1]);
  }

  std::vector<Detection> dets{{{0, 0, 1, 1}, 1, 0.29f}, {{0, 0, 1, 1}, 0, 0.9f}};
  CHECK(!image_fault_decision(dets));
  dets[0].score = 0.3f;
  CHECK(image_fault_decision(dets));

  auto rep = aggregate({metrics_from_counts({5, 5, 0, 0}, "a"), metrics_from_counts({5, 5, 5, 5}, "b")});
  CHECK(rep.mcdr == doctest::Approx(0.5));
  CHECK(to_json(rep).contains("methodology"));
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 2, 3}) == doctest::Approx(2.5));
}

TEST_CASE("config") {
  auto desk = DistillConfig::desk();
  auto paper = DistillConfig::paper();
  CHECK(paper.schedule.lr == doctest::Approx(1e-4));
  CHECK(paper.schedule.epochs == 12);
  CHECK(paper.schedule.batch_size == 4);
  CHECK((paper.schedule.lr_decay_epochs == std::vector<int64_t>{8, 11}));

  auto round = parse_config(to_toml(desk));
  CHECK(config_fingerprint(round) == config_fingerprint(desk));

  auto ov = preset_config("desk", {"loss.tau=5", "schedule.epochs=3", "loss.tau=7"});
  CHECK(ov.weights.tau == doctest::Approx(7));
  CHECK(ov.schedule.epochs == 3);
  CHECK(config_fingerprint(ov) != config_fingerprint(desk));
  CHECK_THROWS_AS(preset_config("desk", {"loss.tau=-1"}), ValidationError);
  CHECK_THROWS_AS(preset_config("desk", {"student.bins=8"}), ValidationError);
  CHECK_THROWS_AS(preset_config("nope"), ValidationError);

  ScheduleConfig s;
  s.lr = 1.0;
  CHECK(s.lr_at_epoch(7) == doctest::Approx(1.0));
  CHECK(s.lr_at_epoch(8) == doctest::Approx(0.1));
  CHECK(s.lr_at_epoch(11) == doctest::Approx(0.01));
}

TEST_CASE("checkpoint round trip") {
  auto dir = scratch("ckpt");
  auto m = build_detector(DetectorSpec::desk(true, Smoothing::ds_conv_k7), 3);
  write_checkpoint(dir / "m.ckpt", make_checkpoint(*m, {{"note", "x"}}));
  auto back = load_detector(dir / "m.ckpt");
  CHECK(parameter_hash(*back) == parameter_hash(*m));
  CHECK(read_checkpoint(dir / "m.ckpt").manifest.at("note") == "x");

  auto other = build_detector(DetectorSpec::desk(false, Smoothing::standard_k3), 3);
  CHECK_THROWS_AS(load_checkpoint_into(read_checkpoint(dir / "m.ckpt"), *other), CheckpointError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(read_checkpoint(dir / "junk.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("loss plot") {
  auto dir = scratch("plot");
  {
    std::ofstream f(dir / "bad.csv");
    f << "iteration,fcl,fdl\n1,0.5,0.2\n";
  }
  try {
    read_loss_csv(dir / "bad.csv");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("frl") != std::string::npos);
  }
  {
    std::ofstream f(dir / "empty.csv");
    f << "iteration,fcl,fdl,frl,hkd,total\n";
  }
  CHECK_THROWS_AS(read_loss_csv(dir / "empty.csv"), ValidationError);

  std::vector<LossBundle> rows;
  for (int i = 0; i < 50; ++i) {
    const double v = 2.0 - i * 0.03;
    rows.push_back({v, v, v, v, v});
  }
  write_loss_csv(dir / "ok.csv", rows);
  auto series = read_loss_csv(dir / "ok.csv", "run");
  CHECK(series.iteration.size() == 50);

  // A decreasing curve: the coloured pixel's column moves right as its row moves down.
  auto img = render_loss_panels({series});
  auto area = panel_plot_area(4);
  auto colour = series_color(0);
  int prev_row = -1, hits = 0;
  for (int x = area.x; x < area.x + area.width; ++x) {
    for (int y = area.y; y < area.y + area.height; ++y) {
      auto px = img.at<cv::Vec3b>(y, x);
      if (px[0] == colour[0] && px[1] == colour[1] && px[2] == colour[2]) {
        CHECK(y >= prev_row - 1);
        prev_row = y;
        ++hits;
        break;
      }
    }
  }
  CHECK(hits > area.width / 2);
  plot_loss({dir / "ok.csv"}, dir / "out.png");
  CHECK(fs::file_size(dir / "out.png") > 0);
  fs::remove_all(dir);
}

TEST_CASE("training smoke and resume") {
  auto root = scratch("train");
  generate_synthetic(tiny_spec(8, 4), root / "data");
  auto train = load_dataset(root / "data", "train");
  auto stats = load_or_compute_stats(root / "data");
  auto cfg = preset_config("desk", {"schedule.epochs=2", "data.image_height=128", "data.image_width=128"});

  TrainOptions full;
  full.out_dir = root / "full";
  auto a = train_teacher(cfg, train, stats, full);
  REQUIRE(a.report.iterations.size() == 4);
  CHECK(a.report.lr_trace.size() == 2);
  for (const auto& b : a.report.iterations) {
    CHECK(std::isfinite(b.total));
    CHECK(b.hkd == 0.0);
  }

  auto one = cfg;
  one.schedule.epochs = 1;
  TrainOptions first;
  first.out_dir = root / "first";
  train_teacher(one, train, stats, first);
  TrainOptions resumed;
  resumed.resume_from = root / "first" / "state.ckpt";
  auto r = train_teacher(cfg, train, stats, resumed);
  REQUIRE(r.report.iterations.size() == 2);
  CHECK(r.report.iterations[0].total == doctest::Approx(a.report.iterations[2].total).epsilon(1e-5));
  CHECK(r.report.iterations[1].total == doctest::Approx(a.report.iterations[3].total).epsilon(1e-5));

  auto student_cfg = cfg;
  student_cfg.schedule.epochs = 1;
  auto s = train_student(student_cfg, train, stats, a.model);
  CHECK(s.report.teacher_hash_before == s.report.teacher_hash_after);
  for (const auto& b : s.report.iterations) CHECK(std::isfinite(b.hkd));

  auto ev = evaluate(*s.model, load_dataset(root / "data", "test"), stats, cfg.data);
  CHECK(ev.metrics.counts.total() == 4);
  CHECK(ev.detections.size() == 4);

  CHECK_THROWS_AS(train_teacher(cfg, {}, stats), ValidationError);
  fs::remove_all(root);
}
