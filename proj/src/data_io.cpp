#include "hsd/data_io.hpp"

#include "hsd/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace hsd {

namespace fs = std::filesystem;
using nlohmann::json;

bool has_fault(const std::vector<BoxLabel>& boxes) {
  return std::any_of(boxes.begin(), boxes.end(), [](const BoxLabel& b) { return b.class_id == kComponentMissing; });
}

fs::path annotation_path(const fs::path& root, const std::string& split) {
  return root / "annotations" / ("instances_" + split + ".json");
}

std::vector<AnnotatedImage> load_dataset(const fs::path& root, const std::string& split) {
  const auto ann_path = annotation_path(root, split);
  std::ifstream is(ann_path);
  if (!is) throw DataError("annotation file not found: " + ann_path.string());
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    throw DataError("cannot parse " + ann_path.string() + ": " + e.what());
  }

  std::vector<AnnotatedImage> samples;
  std::map<int64_t, size_t> by_id;
  std::vector<std::pair<int64_t, int64_t>> sizes;
  for (const auto& img : doc.at("images")) {
    const auto file = img.at("file_name").get<std::string>();
    const auto path = root / "images" / split / file;
    if (!fs::exists(path)) throw DataError("image referenced by " + ann_path.string() + " is missing: " + path.string());
    AnnotatedImage s;
    s.image_id = fs::path(file).stem().string();
    s.pixels = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (s.pixels.empty()) throw DataError("cannot decode image " + path.string());
    const int64_t w = img.value("width", static_cast<int64_t>(s.pixels.cols));
    const int64_t h = img.value("height", static_cast<int64_t>(s.pixels.rows));
    if (w != s.pixels.cols || h != s.pixels.rows) {
      throw DataError("image " + path.string() + " size differs from its annotation record");
    }
    by_id[img.at("id").get<int64_t>()] = samples.size();
    samples.push_back(std::move(s));
  }

  const auto& anns = doc.at("annotations");
  for (size_t k = 0; k < anns.size(); ++k) {
    const auto& a = anns[k];
    const auto where = ann_path.string() + " annotation record " + std::to_string(k);
    auto it = by_id.find(a.at("image_id").get<int64_t>());
    if (it == by_id.end()) throw DataError(where + ": unknown image_id");
    auto& s = samples[it->second];
    const auto bb = a.at("bbox").get<std::vector<double>>();
    if (bb.size() != 4) throw DataError(where + ": bbox must have 4 numbers");
    BoxLabel b{static_cast<float>(bb[0]), static_cast<float>(bb[1]), static_cast<float>(bb[0] + bb[2]),
               static_cast<float>(bb[1] + bb[3]), a.at("category_id").get<int64_t>()};
    if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw DataError(where + ": degenerate box (x1 >= x2 or y1 >= y2)");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > s.pixels.cols || b.y2 > s.pixels.rows) {
      throw DataError(where + ": box outside image bounds");
    }
    if (b.class_id != kComponentPresent && b.class_id != kComponentMissing) {
      throw DataError(where + ": unknown category_id " + std::to_string(b.class_id));
    }
    s.boxes.push_back(b);
  }
  for (auto& s : samples) s.image_fault_flag = has_fault(s.boxes);
  return samples;
}

void SyntheticSpec::validate() const {
  if (num_train < 0 || num_test < 0) throw ValidationError("SyntheticSpec: split sizes must be >= 0");
  if (image_height < 64 || image_width < 64) throw ValidationError("SyntheticSpec: images must be at least 64x64");
  if (!(fault_ratio > 0 && fault_ratio < 1)) throw ValidationError("SyntheticSpec.fault_ratio: must be in (0,1)");
  if (clutter_level < 0) throw ValidationError("SyntheticSpec.clutter_level: must be >= 0");
  if (occlusion_prob < 0 || occlusion_prob >= 1) throw ValidationError("SyntheticSpec.occlusion_prob: must be in [0,1)");
  if (!(min_box_frac > 0 && min_box_frac < max_box_frac && max_box_frac < 0.5)) {
    throw ValidationError("SyntheticSpec: need 0 < min_box_frac < max_box_frac < 0.5");
  }
  if (!(min_aspect > 0 && min_aspect <= max_aspect)) throw ValidationError("SyntheticSpec: bad aspect band");
}

namespace {

struct Fixture {
  cv::Rect bracket;
  cv::Rect slot;
  bool missing = false;
};

class Scene {
 public:
  Scene(const SyntheticSpec& spec, std::mt19937_64& rng) : spec_(spec), rng_(rng) {}

  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }

  cv::Mat render(bool fault, std::vector<BoxLabel>& boxes) {
    const int h = static_cast<int>(spec_.image_height);
    const int w = static_cast<int>(spec_.image_width);
    cv::Mat img(h, w, CV_8UC3);
    background(img);

    const int count = uniform(1, 2);
    std::vector<Fixture> fixtures;
    for (int attempt = 0; attempt < 200 && static_cast<int>(fixtures.size()) < count; ++attempt) {
      auto f = propose_fixture(h, w);
      bool clash = false;
      for (const auto& g : fixtures) clash |= (f.bracket & g.bracket).area() > 0;
      if (!clash) fixtures.push_back(f);
    }
    if (fault) {
      fixtures[uniform(0, static_cast<int>(fixtures.size()) - 1)].missing = true;
      for (auto& f : fixtures)
        if (!f.missing) f.missing = coin(0.25);
    }

    for (int i = 0; i < spec_.clutter_level; ++i) distractor(img, fixtures);
    for (const auto& f : fixtures) draw_fixture(img, f);
    for (const auto& f : fixtures)
      if (coin(spec_.occlusion_prob)) occlude(img, f);

    for (const auto& f : fixtures) {
      boxes.push_back(BoxLabel{static_cast<float>(f.slot.x), static_cast<float>(f.slot.y),
                               static_cast<float>(f.slot.x + f.slot.width),
                               static_cast<float>(f.slot.y + f.slot.height),
                               f.missing ? kComponentMissing : kComponentPresent});
    }
    return img;
  }

 private:
  void background(cv::Mat& img) {
    const int base = uniform(95, 150);
    const double grad = uniform(-25.0, 25.0);
    for (int y = 0; y < img.rows; ++y) {
      auto* row = img.ptr<cv::Vec3b>(y);
      const double g = base + grad * (static_cast<double>(y) / img.rows - 0.5);
      for (int x = 0; x < img.cols; ++x) {
        const int n = uniform(-10, 10);
        for (int c = 0; c < 3; ++c) row[x][c] = cv::saturate_cast<uchar>(g + n + (c == 0 ? 6 : 0));
      }
    }
    // Axle-like horizontal bars and plates.
    const int bars = uniform(1, 2);
    for (int i = 0; i < bars; ++i) {
      const int bh = uniform(img.rows / 12, img.rows / 6);
      const int by = uniform(0, img.rows - bh);
      const int shade = uniform(55, 85);
      cv::rectangle(img, cv::Rect(0, by, img.cols, bh), cv::Scalar(shade + 5, shade, shade), cv::FILLED);
      cv::line(img, {0, by}, {img.cols, by}, cv::Scalar(shade + 40, shade + 40, shade + 40), 1);
    }
    const int plates = uniform(1, 3);
    for (int i = 0; i < plates; ++i) {
      const int pw = uniform(img.cols / 10, img.cols / 4);
      const int ph = uniform(img.rows / 4, img.rows / 2);
      const cv::Rect r(uniform(0, img.cols - pw), uniform(0, img.rows - ph), pw, ph);
      const int shade = uniform(100, 170);
      cv::rectangle(img, r, cv::Scalar(shade, shade, shade - 5), cv::FILLED);
      cv::rectangle(img, r, cv::Scalar(shade - 50, shade - 50, shade - 50), 2);
    }
  }

  Fixture propose_fixture(int h, int w) {
    const double side = std::min(h, w);
    const double lo = spec_.min_box_frac * side;
    const double hi = spec_.max_box_frac * side;
    int sw = 0;
    int sh = 0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      sh = static_cast<int>(std::round(uniform(lo, hi)));
      sw = static_cast<int>(std::round(sh * uniform(spec_.min_aspect, spec_.max_aspect)));
      const double aspect = static_cast<double>(sw) / sh;
      if (sw >= lo && sw <= hi && sh >= lo && aspect >= spec_.min_aspect && aspect <= spec_.max_aspect) break;
    }
    const int margin = std::max(4, static_cast<int>(0.3 * std::max(sw, sh)));
    const int bw = sw + 2 * margin;
    const int bh = sh + 2 * margin;
    const int bx = uniform(1, w - bw - 1);
    const int by = uniform(1, h - bh - 1);
    return Fixture{cv::Rect(bx, by, bw, bh), cv::Rect(bx + margin, by + margin, sw, sh), false};
  }

  void draw_fixture(cv::Mat& img, const Fixture& f) {
    const int shade = uniform(70, 95);
    cv::rectangle(img, f.bracket, cv::Scalar(shade + 12, shade, shade - 5), cv::FILLED);
    cv::rectangle(img, f.bracket, cv::Scalar(shade - 40, shade - 40, shade - 40), 2);
    const int r = std::max(2, std::min(f.bracket.width, f.bracket.height) / 12);
    for (auto c : {f.bracket.tl() + cv::Point(2 * r, 2 * r), f.bracket.br() - cv::Point(2 * r, 2 * r),
                   cv::Point(f.bracket.x + 2 * r, f.bracket.br().y - 2 * r),
                   cv::Point(f.bracket.br().x - 2 * r, f.bracket.y + 2 * r)}) {
      cv::circle(img, c, r, cv::Scalar(170, 170, 170), cv::FILLED);
    }
    if (f.missing) {
      const int dark = uniform(8, 28);
      cv::rectangle(img, f.slot, cv::Scalar(dark, dark, dark), cv::FILLED);
      cv::rectangle(img, f.slot, cv::Scalar(150, 150, 150), 1);
    } else {
      const cv::Scalar key(uniform(25, 60), uniform(160, 200), uniform(210, 245));
      cv::rectangle(img, f.slot, key, cv::FILLED);
      const int head = std::max(2, std::min(f.slot.width, f.slot.height) / 3);
      cv::circle(img, {f.slot.x + f.slot.width / 2, f.slot.y + head}, head, key * 0.85, cv::FILLED);
      cv::line(img, {f.slot.x + 2, f.slot.y + f.slot.height / 2},
               {f.slot.x + f.slot.width - 3, f.slot.y + f.slot.height / 2}, cv::Scalar(20, 70, 90), 2);
    }
  }

  void distractor(cv::Mat& img, const std::vector<Fixture>& fixtures) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int size = uniform(6, std::max(8, img.rows / 8));
      const cv::Rect r(uniform(0, img.cols - size), uniform(0, img.rows - size), size, size);
      bool clash = false;
      for (const auto& f : fixtures) clash |= (r & f.bracket).area() > 0;
      if (clash) continue;
      const int g = uniform(40, 210);
      const cv::Scalar color(g + uniform(0, 40), g, g - uniform(0, 20));
      switch (uniform(0, 2)) {
        case 0: cv::circle(img, (r.tl() + r.br()) / 2, size / 2, color, cv::FILLED); break;
        case 1: cv::rectangle(img, r, color, cv::FILLED); break;
        default: cv::line(img, r.tl(), r.br(), color, uniform(1, 3)); break;
      }
      return;
    }
  }

  void occlude(cv::Mat& img, const Fixture& f) {
    // A pipe across part of the slot; covers at most ~35% of it.
    const int shade = uniform(110, 160);
    if (coin(0.5)) {
      const int t = std::max(2, static_cast<int>(f.slot.width * uniform(0.15, 0.35)));
      const int x = coin(0.5) ? f.slot.x : f.slot.x + f.slot.width - t;
      cv::rectangle(img, cv::Rect(x, f.bracket.y - 4, t, f.bracket.height + 8) & cv::Rect(0, 0, img.cols, img.rows),
                    cv::Scalar(shade, shade, shade), cv::FILLED);
    } else {
      const int t = std::max(2, static_cast<int>(f.slot.height * uniform(0.15, 0.35)));
      const int y = coin(0.5) ? f.slot.y : f.slot.y + f.slot.height - t;
      cv::rectangle(img, cv::Rect(f.bracket.x - 4, y, f.bracket.width + 8, t) & cv::Rect(0, 0, img.cols, img.rows),
                    cv::Scalar(shade, shade, shade), cv::FILLED);
    }
  }

  const SyntheticSpec& spec_;
  std::mt19937_64& rng_;
};

SplitCounts write_split(const SyntheticSpec& spec, const fs::path& out, const std::string& split, int64_t count,
                        std::mt19937_64& rng) {
  fs::create_directories(out / "images" / split);
  fs::create_directories(out / "annotations");
  const auto num_fault = static_cast<int64_t>(std::llround(static_cast<double>(count) * spec.fault_ratio));
  std::vector<bool> fault_flags(count, false);
  std::fill(fault_flags.begin(), fault_flags.begin() + num_fault, true);
  std::shuffle(fault_flags.begin(), fault_flags.end(), rng);

  json images = json::array();
  json annotations = json::array();
  Scene scene(spec, rng);
  int64_t ann_id = 0;
  SplitCounts counts;
  for (int64_t i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%05lld.png", split.c_str(), static_cast<long long>(i));
    std::vector<BoxLabel> boxes;
    cv::Mat img = scene.render(fault_flags[i], boxes);
    if (!cv::imwrite((out / "images" / split / name).string(), img)) {
      throw DataError(std::string("cannot write image ") + name);
    }
    images.push_back({{"id", i}, {"file_name", name}, {"width", img.cols}, {"height", img.rows}});
    for (const auto& b : boxes) {
      const double bw = b.x2 - b.x1;
      const double bh = b.y2 - b.y1;
      annotations.push_back({{"id", ann_id++},
                             {"image_id", i},
                             {"bbox", {b.x1, b.y1, bw, bh}},
                             {"category_id", b.class_id},
                             {"area", bw * bh},
                             {"iscrowd", 0}});
    }
    (fault_flags[i] ? counts.fault : counts.normal) += 1;
  }
  json doc{{"images", images},
           {"annotations", annotations},
           {"categories", {{{"id", kComponentPresent}, {"name", kClassNames[0]}},
                           {{"id", kComponentMissing}, {"name", kClassNames[1]}}}}};
  std::ofstream os(annotation_path(out, split));
  os << doc.dump(1) << '\n';
  if (!os) throw DataError("cannot write annotations for split " + split);
  return counts;
}

}  // namespace

GenerationReport generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::seed_seq seq{static_cast<uint64_t>(spec.seed), uint64_t{0x5eedULL}};
  std::mt19937_64 rng(seq);
  GenerationReport report;
  report.train = write_split(spec, out_dir, "train", spec.num_train, rng);
  report.test = write_split(spec, out_dir, "test", spec.num_test, rng);
  fs::remove(out_dir / "stats.json");
  return report;
}

bool AnnotationAudit::within(const SyntheticSpec& spec) const {
  const double side = static_cast<double>(std::min(spec.image_height, spec.image_width));
  const double lo = std::floor(spec.min_box_frac * side) - 1.0;
  const double hi = std::ceil(spec.max_box_frac * side) + 1.0;
  // Rounded integer sides shift the aspect by at most 1px on each side.
  const double aspect_slack = 2.0 / (spec.min_box_frac * side);
  return num_boxes > 0 && min_side >= lo && max_side <= hi && min_aspect >= spec.min_aspect - aspect_slack &&
         max_aspect <= spec.max_aspect + aspect_slack && mean_width >= lo && mean_width <= hi && mean_height >= lo &&
         mean_height <= hi;
}

AnnotationAudit audit_annotations(const std::vector<AnnotatedImage>& samples) {
  AnnotationAudit a;
  a.min_side = a.min_aspect = std::numeric_limits<double>::infinity();
  a.max_side = a.max_aspect = 0;
  for (const auto& s : samples) {
    for (const auto& b : s.boxes) {
      const double w = b.x2 - b.x1;
      const double h = b.y2 - b.y1;
      ++a.num_boxes;
      a.mean_width += w;
      a.mean_height += h;
      a.min_side = std::min({a.min_side, w, h});
      a.max_side = std::max({a.max_side, w, h});
      a.min_aspect = std::min(a.min_aspect, w / h);
      a.max_aspect = std::max(a.max_aspect, w / h);
    }
  }
  if (a.num_boxes > 0) {
    a.mean_width /= static_cast<double>(a.num_boxes);
    a.mean_height /= static_cast<double>(a.num_boxes);
  }
  return a;
}

DatasetStats compute_stats(const std::vector<AnnotatedImage>& samples) {
  std::array<double, 3> sum{};
  std::array<double, 3> sq{};
  double n = 0;
  for (const auto& s : samples) {
    for (int y = 0; y < s.pixels.rows; ++y) {
      const auto* row = s.pixels.ptr<cv::Vec3b>(y);
      for (int x = 0; x < s.pixels.cols; ++x) {
        for (int c = 0; c < 3; ++c) {
          sum[c] += row[x][c];
          sq[c] += static_cast<double>(row[x][c]) * row[x][c];
        }
      }
    }
    n += static_cast<double>(s.pixels.total());
  }
  if (n == 0) throw DataError("cannot compute statistics of an empty dataset");
  DatasetStats st;
  for (int c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / n;
    st.std[c] = std::sqrt(std::max(sq[c] / n - st.mean[c] * st.mean[c], 1e-12));
  }
  return st;
}

DatasetStats load_or_compute_stats(const fs::path& root) {
  const auto path = root / "stats.json";
  if (fs::exists(path)) {
    std::ifstream is(path);
    json j;
    is >> j;
    DatasetStats st;
    st.mean = j.at("mean").get<std::array<double, 3>>();
    st.std = j.at("std").get<std::array<double, 3>>();
    return st;
  }
  auto st = compute_stats(load_dataset(root, "train"));
  std::ofstream os(path);
  os << json{{"mean", st.mean}, {"std", st.std}, {"channel_order", "BGR"}}.dump(1) << '\n';
  return st;
}

std::vector<BoxLabel> hflip_boxes(const std::vector<BoxLabel>& boxes, double width) {
  std::vector<BoxLabel> out = boxes;
  for (auto& b : out) {
    const float x1 = static_cast<float>(width - b.x2);
    const float x2 = static_cast<float>(width - b.x1);
    b.x1 = x1;
    b.x2 = x2;
  }
  return out;
}

Preprocessed preprocess(const AnnotatedImage& sample, bool train_mode, const DatasetStats& stats,
                        const PreprocessOptions& opts, std::mt19937_64& rng) {
  const int th = static_cast<int>(opts.target_height);
  const int tw = static_cast<int>(opts.target_width);
  cv::Mat resized;
  if (sample.pixels.rows != th || sample.pixels.cols != tw) {
    cv::resize(sample.pixels, resized, cv::Size(tw, th), 0, 0, cv::INTER_LINEAR);
  } else {
    resized = sample.pixels;
  }
  const double sx = static_cast<double>(tw) / sample.pixels.cols;
  const double sy = static_cast<double>(th) / sample.pixels.rows;

  cv::Mat f;
  resized.convertTo(f, CV_32FC3);
  auto img = torch::from_blob(f.data, {th, tw, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
  auto mean = torch::tensor({stats.mean[0], stats.mean[1], stats.mean[2]}, torch::kFloat32).view({3, 1, 1});
  auto stdv = torch::tensor({stats.std[0], stats.std[1], stats.std[2]}, torch::kFloat32).view({3, 1, 1});
  img = (img - mean) / stdv;

  Preprocessed out;
  for (auto b : sample.boxes) {
    b.x1 = static_cast<float>(b.x1 * sx);
    b.x2 = static_cast<float>(b.x2 * sx);
    b.y1 = static_cast<float>(b.y1 * sy);
    b.y2 = static_cast<float>(b.y2 * sy);
    out.boxes.push_back(b);
  }
  if (train_mode && std::bernoulli_distribution(opts.flip_prob)(rng)) {
    img = img.flip({2});
    out.boxes = hflip_boxes(out.boxes, tw);
    out.flipped = true;
  }
  const int64_t m = std::max<int64_t>(1, opts.pad_multiple);
  const int64_t ph = (m - th % m) % m;
  const int64_t pw = (m - tw % m) % m;
  if (ph || pw) img = torch::constant_pad_nd(img, {0, pw, 0, ph}, 0.0);
  out.image = img.contiguous();
  return out;
}

}  // namespace hsd
