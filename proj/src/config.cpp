#include "hsd/config.hpp"

#include "hsd/errors.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include <toml.hpp>

namespace hsd {

double ScheduleConfig::lr_at_epoch(int64_t epoch) const {
  double lr_e = lr;
  for (auto d : lr_decay_epochs)
    if (epoch >= d) lr_e *= lr_decay_factor;
  return lr_e;
}

void DistillConfig::validate() const {
  teacher.validate();
  student.validate();
  weights.validate();
  if (teacher.head.bins != student.head.bins || teacher.head.eps_min != student.head.eps_min ||
      teacher.head.eps_max != student.head.eps_max) {
    throw ValidationError("teacher and student heads must share bins and [eps_min, eps_max] for distillation");
  }
  if (teacher.head.num_classes != student.head.num_classes) {
    throw ValidationError("teacher and student must predict the same number of classes");
  }
  if (schedule.epochs <= 0) throw ValidationError("schedule.epochs: must be positive");
  if (schedule.batch_size <= 0) throw ValidationError("schedule.batch_size: must be positive");
  if (!(schedule.lr > 0)) throw ValidationError("schedule.lr: must be positive");
  if (schedule.momentum < 0 || schedule.momentum >= 1) throw ValidationError("schedule.momentum: must be in [0,1)");
  if (schedule.weight_decay < 0) throw ValidationError("schedule.weight_decay: must be >= 0");
  if (!(schedule.lr_decay_factor > 0)) throw ValidationError("schedule.lr_decay_factor: must be positive");
  if (data.image_height <= 0 || data.image_width <= 0) throw ValidationError("data: image size must be positive");
  if (data.flip_prob < 0 || data.flip_prob > 1) throw ValidationError("data.flip_prob: must be in [0,1]");
}

DistillConfig DistillConfig::desk() {
  DistillConfig c;
  c.preset = "desk";
  c.teacher = DetectorSpec::desk(true, Smoothing::standard_k3);
  c.student = DetectorSpec::desk(true, Smoothing::ds_conv_k7);
  c.schedule.lr = 1e-2;
  c.data.image_height = 256;
  c.data.image_width = 256;
  return c;
}

DistillConfig DistillConfig::paper() {
  DistillConfig c;
  c.preset = "paper";
  c.teacher = DetectorSpec::paper(true, Smoothing::standard_k3);
  c.student = DetectorSpec::paper(true, Smoothing::ds_conv_k7);
  c.schedule.lr = 1e-4;
  c.data.image_height = 512;
  c.data.image_width = 700;
  return c;
}

namespace {

template <typename T>
toml::array to_array(const std::vector<T>& v) {
  toml::array a;
  for (const auto& x : v) a.push_back(x);
  return a;
}

toml::table detector_table(const DetectorSpec& s) {
  return toml::table{
      {"stage_channels", to_array(s.backbone.stage_channels)},
      {"blocks_per_stage", to_array(s.backbone.blocks_per_stage)},
      {"input_channels", s.backbone.input_channels},
      {"stem_channels", s.backbone.stem_channels},
      {"stem_kernel", s.backbone.stem_kernel},
      {"neck_channels", s.neck.out_channels},
      {"levels", s.neck.levels},
      {"fca", s.neck.fca_enabled},
      {"smoothing", to_string(s.neck.smoothing)},
      {"fca_reduction", s.neck.fca_reduction},
      {"fca_min_bottleneck", s.neck.fca_min_bottleneck},
      {"num_classes", s.head.num_classes},
      {"stacked_convs", s.head.stacked_convs},
      {"bins", s.head.bins},
      {"eps_min", s.head.eps_min},
      {"eps_max", s.head.eps_max},
      {"norm_groups", s.head.norm_groups},
      {"prior_prob", s.head.prior_prob},
  };
}

toml::table to_table(const DistillConfig& c) {
  toml::table t;
  t.insert("preset", c.preset);
  t.insert("teacher", detector_table(c.teacher));
  t.insert("student", detector_table(c.student));
  t.insert("loss", toml::table{{"lambda1", c.weights.lambda1},
                               {"lambda2", c.weights.lambda2},
                               {"tau", c.weights.tau},
                               {"hkd_weight", c.weights.hkd_weight}});
  t.insert("schedule", toml::table{{"epochs", c.schedule.epochs},
                                   {"batch_size", c.schedule.batch_size},
                                   {"lr", c.schedule.lr},
                                   {"momentum", c.schedule.momentum},
                                   {"weight_decay", c.schedule.weight_decay},
                                   {"lr_decay_epochs", to_array(c.schedule.lr_decay_epochs)},
                                   {"lr_decay_factor", c.schedule.lr_decay_factor},
                                   {"grad_clip", c.schedule.grad_clip},
                                   {"seed", c.schedule.seed},
                                   {"max_iterations", c.schedule.max_iterations},
                                   {"warm_start", c.schedule.warm_start},
                                   {"distill", c.schedule.distill}});
  t.insert("data", toml::table{{"root", c.data.root},
                               {"image_height", c.data.image_height},
                               {"image_width", c.data.image_width},
                               {"flip_prob", c.data.flip_prob},
                               {"decision_threshold", c.data.decision_threshold},
                               {"score_threshold", c.data.score_threshold},
                               {"nms_iou", c.data.nms_iou}});
  return t;
}

template <typename T>
T get(const toml::table& t, std::string_view section, std::string_view key) {
  const auto node = t[section][key];
  if constexpr (std::is_same_v<T, std::vector<int64_t>>) {
    const auto* arr = node.as_array();
    if (!arr) throw ValidationError(std::string(section) + "." + std::string(key) + ": expected an integer array");
    std::vector<int64_t> out;
    for (const auto& e : *arr) {
      auto v = e.template value<int64_t>();
      if (!v) throw ValidationError(std::string(section) + "." + std::string(key) + ": expected integers");
      out.push_back(*v);
    }
    return out;
  } else {
    auto v = node.template value<T>();
    if (!v) throw ValidationError(std::string(section) + "." + std::string(key) + ": missing or wrong type");
    return *v;
  }
}

DetectorSpec detector_from(const toml::table& t, std::string_view sec) {
  DetectorSpec s;
  s.backbone.stage_channels = get<std::vector<int64_t>>(t, sec, "stage_channels");
  s.backbone.blocks_per_stage = get<std::vector<int64_t>>(t, sec, "blocks_per_stage");
  s.backbone.input_channels = get<int64_t>(t, sec, "input_channels");
  s.backbone.stem_channels = get<int64_t>(t, sec, "stem_channels");
  s.backbone.stem_kernel = get<int64_t>(t, sec, "stem_kernel");
  s.neck.out_channels = get<int64_t>(t, sec, "neck_channels");
  s.neck.levels = get<int64_t>(t, sec, "levels");
  s.neck.fca_enabled = get<bool>(t, sec, "fca");
  s.neck.smoothing = smoothing_from_string(get<std::string>(t, sec, "smoothing"));
  s.neck.fca_reduction = get<int64_t>(t, sec, "fca_reduction");
  s.neck.fca_min_bottleneck = get<int64_t>(t, sec, "fca_min_bottleneck");
  s.head.num_classes = get<int64_t>(t, sec, "num_classes");
  s.head.in_channels = s.neck.out_channels;
  s.head.stacked_convs = get<int64_t>(t, sec, "stacked_convs");
  s.head.bins = get<int64_t>(t, sec, "bins");
  s.head.eps_min = get<double>(t, sec, "eps_min");
  s.head.eps_max = get<double>(t, sec, "eps_max");
  s.head.norm_groups = get<int64_t>(t, sec, "norm_groups");
  s.head.prior_prob = get<double>(t, sec, "prior_prob");
  return s;
}

DistillConfig from_table(const toml::table& t) {
  DistillConfig c;
  c.preset = t["preset"].value_or(std::string("desk"));
  c.teacher = detector_from(t, "teacher");
  c.student = detector_from(t, "student");
  c.weights.lambda1 = get<double>(t, "loss", "lambda1");
  c.weights.lambda2 = get<double>(t, "loss", "lambda2");
  c.weights.tau = get<double>(t, "loss", "tau");
  c.weights.hkd_weight = get<double>(t, "loss", "hkd_weight");
  c.schedule.epochs = get<int64_t>(t, "schedule", "epochs");
  c.schedule.batch_size = get<int64_t>(t, "schedule", "batch_size");
  c.schedule.lr = get<double>(t, "schedule", "lr");
  c.schedule.momentum = get<double>(t, "schedule", "momentum");
  c.schedule.weight_decay = get<double>(t, "schedule", "weight_decay");
  c.schedule.lr_decay_epochs = get<std::vector<int64_t>>(t, "schedule", "lr_decay_epochs");
  c.schedule.lr_decay_factor = get<double>(t, "schedule", "lr_decay_factor");
  c.schedule.grad_clip = get<double>(t, "schedule", "grad_clip");
  c.schedule.seed = get<int64_t>(t, "schedule", "seed");
  c.schedule.max_iterations = get<int64_t>(t, "schedule", "max_iterations");
  c.schedule.warm_start = get<bool>(t, "schedule", "warm_start");
  c.schedule.distill = get<bool>(t, "schedule", "distill");
  c.data.root = get<std::string>(t, "data", "root");
  c.data.image_height = get<int64_t>(t, "data", "image_height");
  c.data.image_width = get<int64_t>(t, "data", "image_width");
  c.data.flip_prob = get<double>(t, "data", "flip_prob");
  c.data.decision_threshold = get<double>(t, "data", "decision_threshold");
  c.data.score_threshold = get<double>(t, "data", "score_threshold");
  c.data.nms_iou = get<double>(t, "data", "nms_iou");
  c.validate();
  return c;
}

DistillConfig base_for(const std::string& preset) {
  if (preset == "desk") return DistillConfig::desk();
  if (preset == "paper") return DistillConfig::paper();
  throw ValidationError("unknown preset '" + preset + "' (expected desk or paper)");
}

// Writes `value` at section.key, refusing keys the schema does not know.
void assign(toml::table& base, const std::string& section, const std::string& key, const toml::node& value) {
  auto* sec = base[section].as_table();
  if (!sec) throw ValidationError("unknown config section [" + section + "]");
  if (!sec->contains(key)) throw ValidationError("unknown config key " + section + "." + key);
  // Integer literals are accepted where floats are expected.
  const auto* existing = sec->get(key);
  if (existing->is_floating_point() && value.is_integer()) {
    sec->insert_or_assign(key, static_cast<double>(value.value<int64_t>().value()));
    return;
  }
  if (existing->type() != value.type()) {
    throw ValidationError("config key " + section + "." + key + " has the wrong type");
  }
  sec->insert_or_assign(key, value);
}

void merge(toml::table& base, const toml::table& user) {
  for (const auto& [k, v] : user) {
    const std::string key(k.str());
    if (key == "preset") continue;
    const auto* sec = v.as_table();
    if (!sec) throw ValidationError("unexpected top-level key '" + key + "'");
    for (const auto& [kk, vv] : *sec) assign(base, key, std::string(kk.str()), vv);
  }
}

void apply_overrides(toml::table& base, const std::vector<std::string>& overrides) {
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    const auto dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ValidationError("override '" + ov + "' must look like section.key=value");
    }
    const std::string section = ov.substr(0, dot);
    const std::string key = ov.substr(dot + 1, eq - dot - 1);
    const std::string text = ov.substr(eq + 1);
    toml::table parsed;
    try {
      parsed = toml::parse("v = " + text);
    } catch (const toml::parse_error&) {
      parsed = toml::table{{"v", text}};  // bare word -> string
    }
    assign(base, section, key, *parsed.get("v"));
  }
}

DistillConfig build(const toml::table* user, const std::vector<std::string>& overrides, std::string preset) {
  if (user) preset = (*user)["preset"].value_or(preset);
  for (const auto& ov : overrides)
    if (ov.rfind("preset=", 0) == 0) preset = ov.substr(7);
  auto base = to_table(base_for(preset));
  if (user) merge(base, *user);
  std::vector<std::string> rest;
  for (const auto& ov : overrides)
    if (ov.rfind("preset=", 0) != 0) rest.push_back(ov);
  apply_overrides(base, rest);
  return from_table(base);
}

}  // namespace

DistillConfig parse_config(const std::string& toml_text, const std::vector<std::string>& overrides) {
  toml::table user;
  try {
    user = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw ValidationError(std::string("config parse error: ") + std::string(e.description()));
  }
  return build(&user, overrides, "desk");
}

DistillConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides);
}

DistillConfig preset_config(const std::string& preset, const std::vector<std::string>& overrides) {
  return build(nullptr, overrides, preset);
}

std::string to_toml(const DistillConfig& cfg) {
  std::ostringstream os;
  os << to_table(cfg) << '\n';
  return os.str();
}

std::string config_fingerprint(const DistillConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(std::hash<std::string>{}(to_toml(cfg))));
  return buf;
}

}  // namespace hsd
