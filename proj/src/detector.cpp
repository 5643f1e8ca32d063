#include "hsd/detector.hpp"

#include "hsd/errors.hpp"

#include <cstdio>
#include <functional>
#include <string_view>

namespace hsd {

void DetectorSpec::validate() const {
  backbone.validate();
  neck.validate();
  head.validate();
  if (neck.out_channels != head.in_channels) {
    throw ValidationError("head.in_channels (" + std::to_string(head.in_channels) + ") must equal neck.out_channels (" +
                          std::to_string(neck.out_channels) + ")");
  }
}

DetectorSpec DetectorSpec::desk(bool fca, Smoothing smoothing) {
  DetectorSpec s;
  s.backbone = BackboneSpec::desk();
  s.neck = NeckSpec{64, 5, fca, smoothing, 32, 8};
  s.head = HeadSpec{};
  s.head.in_channels = 64;
  s.head.stacked_convs = 2;
  s.head.norm_groups = 8;
  return s;
}

DetectorSpec DetectorSpec::paper(bool fca, Smoothing smoothing) {
  DetectorSpec s;
  s.backbone = BackboneSpec::resnet18();
  s.neck = NeckSpec{256, 5, fca, smoothing, 32, 8};
  s.head = HeadSpec{};
  s.head.in_channels = 256;
  s.head.stacked_convs = 4;
  s.head.norm_groups = 32;
  return s;
}

void to_json(nlohmann::json& j, const BackboneSpec& s) {
  j = {{"stage_channels", s.stage_channels},
       {"blocks_per_stage", s.blocks_per_stage},
       {"input_channels", s.input_channels},
       {"stem_channels", s.stem_channels},
       {"stem_kernel", s.stem_kernel}};
}

void from_json(const nlohmann::json& j, BackboneSpec& s) {
  j.at("stage_channels").get_to(s.stage_channels);
  j.at("blocks_per_stage").get_to(s.blocks_per_stage);
  s.input_channels = j.value("input_channels", int64_t{3});
  s.stem_channels = j.value("stem_channels", int64_t{16});
  s.stem_kernel = j.value("stem_kernel", int64_t{3});
}

void to_json(nlohmann::json& j, const NeckSpec& s) {
  j = {{"out_channels", s.out_channels},   {"levels", s.levels},
       {"fca_enabled", s.fca_enabled},     {"smoothing", to_string(s.smoothing)},
       {"fca_reduction", s.fca_reduction}, {"fca_min_bottleneck", s.fca_min_bottleneck}};
}

void from_json(const nlohmann::json& j, NeckSpec& s) {
  j.at("out_channels").get_to(s.out_channels);
  j.at("levels").get_to(s.levels);
  j.at("fca_enabled").get_to(s.fca_enabled);
  s.smoothing = smoothing_from_string(j.at("smoothing").get<std::string>());
  s.fca_reduction = j.value("fca_reduction", int64_t{32});
  s.fca_min_bottleneck = j.value("fca_min_bottleneck", int64_t{8});
}

void to_json(nlohmann::json& j, const HeadSpec& s) {
  j = {{"num_classes", s.num_classes}, {"in_channels", s.in_channels}, {"stacked_convs", s.stacked_convs},
       {"bins", s.bins},               {"eps_min", s.eps_min},         {"eps_max", s.eps_max},
       {"norm_groups", s.norm_groups}, {"prior_prob", s.prior_prob}};
}

void from_json(const nlohmann::json& j, HeadSpec& s) {
  j.at("num_classes").get_to(s.num_classes);
  j.at("in_channels").get_to(s.in_channels);
  j.at("stacked_convs").get_to(s.stacked_convs);
  j.at("bins").get_to(s.bins);
  j.at("eps_min").get_to(s.eps_min);
  j.at("eps_max").get_to(s.eps_max);
  s.norm_groups = j.value("norm_groups", int64_t{8});
  s.prior_prob = j.value("prior_prob", 0.01);
}

void to_json(nlohmann::json& j, const DetectorSpec& s) {
  j = {{"backbone", s.backbone}, {"neck", s.neck}, {"head", s.head}};
}

void from_json(const nlohmann::json& j, DetectorSpec& s) {
  j.at("backbone").get_to(s.backbone);
  j.at("neck").get_to(s.neck);
  j.at("head").get_to(s.head);
}

DetectorImpl::DetectorImpl(const DetectorSpec& spec) : spec_(spec) {
  spec_.validate();
  backbone = register_module("backbone", Backbone(spec_.backbone));
  neck = register_module("neck", Neck(spec_.neck, backbone->out_channels()));
  head = register_module("head", Head(spec_.head, spec_.neck.levels));
}

HeadOutput DetectorImpl::forward(const torch::Tensor& images) {
  return head->forward(neck->forward(backbone->forward(images)));
}

std::vector<std::vector<Detection>> DetectorImpl::predict(const torch::Tensor& images,
                                                          const PostprocessOptions& opts) {
  torch::NoGradGuard no_grad;
  auto out = forward(images);
  auto scores = out.class_scores();
  auto dist = distribution_expectation(out.edge_logits, spec_.head);
  auto boxes = decode_boxes(out.locations, out.strides, dist, std::make_pair(images.size(2), images.size(3)));
  std::vector<std::vector<Detection>> result;
  for (int64_t b = 0; b < images.size(0); ++b) {
    result.push_back(postprocess(scores[b], boxes[b], opts));
  }
  return result;
}

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string architecture_fingerprint(DetectorImpl& model) {
  std::string desc = nlohmann::json(model.spec()).dump();
  for (const auto& p : model.named_parameters()) desc += "|" + p.key() + c10::str(p.value().sizes());
  for (const auto& b : model.named_buffers()) desc += "|" + b.key() + c10::str(b.value().sizes());
  return hex64(std::hash<std::string>{}(desc));
}

std::string parameter_hash(const torch::nn::Module& model) {
  std::string bytes;
  for (const auto& p : model.named_parameters()) {
    auto t = p.value().detach().contiguous().to(torch::kFloat32);
    bytes += p.key();
    bytes.append(static_cast<const char*>(t.data_ptr()), static_cast<size_t>(t.numel()) * sizeof(float));
  }
  return hex64(std::hash<std::string>{}(bytes));
}

}  // namespace hsd
