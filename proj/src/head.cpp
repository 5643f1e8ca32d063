#include "hsd/head.hpp"

#include "hsd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <json.hpp>

namespace hsd {

using torch::indexing::Slice;

void HeadSpec::validate() const {
  if (num_classes <= 0) throw ValidationError("HeadSpec.num_classes: must be positive");
  if (in_channels <= 0) throw ValidationError("HeadSpec.in_channels: must be positive");
  if (stacked_convs <= 0) throw ValidationError("HeadSpec.stacked_convs: must be positive");
  if (bins < 2) throw ValidationError("HeadSpec.bins: need n >= 2, got " + std::to_string(bins));
  if (!(eps_min < eps_max)) throw ValidationError("HeadSpec: eps_min must be < eps_max");
  if (norm_groups <= 0 || in_channels % norm_groups != 0) {
    throw ValidationError("HeadSpec.norm_groups: must divide in_channels");
  }
  if (!(prior_prob > 0 && prior_prob < 1)) throw ValidationError("HeadSpec.prior_prob: must be in (0,1)");
}

torch::Tensor bin_points(const HeadSpec& spec, torch::TensorOptions opts) {
  return torch::linspace(spec.eps_min, spec.eps_max, spec.points(), opts);
}

std::pair<torch::Tensor, torch::Tensor> level_locations(const std::vector<std::pair<int64_t, int64_t>>& sizes,
                                                        const std::vector<int64_t>& strides) {
  std::vector<torch::Tensor> locs;
  std::vector<torch::Tensor> strs;
  for (size_t l = 0; l < sizes.size(); ++l) {
    const auto [h, w] = sizes[l];
    const double s = static_cast<double>(strides[l]);
    auto ys = torch::arange(h, torch::kFloat32) * s + s / 2;
    auto xs = torch::arange(w, torch::kFloat32) * s + s / 2;
    auto grid = torch::meshgrid({ys, xs}, "ij");
    locs.push_back(torch::stack({grid[1].reshape(-1), grid[0].reshape(-1)}, 1));
    strs.push_back(torch::full({h * w}, s, torch::kFloat32));
  }
  return {torch::cat(locs), torch::cat(strs)};
}

HeadImpl::HeadImpl(const HeadSpec& spec, int64_t num_levels) : spec_(spec), num_levels_(num_levels) {
  spec_.validate();
  cls_tower = register_module("cls_tower", torch::nn::Sequential());
  reg_tower = register_module("reg_tower", torch::nn::Sequential());
  for (int64_t i = 0; i < spec_.stacked_convs; ++i) {
    ConvSpec unit{spec_.in_channels, spec_.in_channels, 3, 1};
    unit.normalization = Normalization::group_norm;
    unit.norm_groups = spec_.norm_groups;
    cls_tower->push_back(ConvUnit(unit));
    reg_tower->push_back(ConvUnit(unit));
  }
  cls_out = register_module(
      "cls_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.in_channels, spec_.num_classes, 3).padding(1)));
  reg_out = register_module(
      "reg_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.in_channels, 4 * spec_.points(), 3).padding(1)));
  scales = register_parameter("scales", torch::ones({num_levels_}));

  torch::NoGradGuard no_grad;
  for (auto& m : modules(false)) {
    if (auto* conv = dynamic_cast<torch::nn::Conv2dImpl*>(m.get())) {
      torch::nn::init::normal_(conv->weight, 0.0, 0.01);
      if (conv->bias.defined()) torch::nn::init::zeros_(conv->bias);
    } else if (auto* gn = dynamic_cast<torch::nn::GroupNormImpl*>(m.get())) {
      torch::nn::init::ones_(gn->weight);
      torch::nn::init::zeros_(gn->bias);
    }
  }
  cls_out->bias.fill_(-std::log((1.0 - spec_.prior_prob) / spec_.prior_prob));
}

std::pair<torch::Tensor, torch::Tensor> HeadImpl::forward_level(const torch::Tensor& x, int64_t level,
                                                                bool apply_scale) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw ShapeError("head expects (N," + std::to_string(spec_.in_channels) + ",H,W), got " + c10::str(x.sizes()));
  }
  auto cls = cls_out->forward(cls_tower->forward(x));
  auto reg = reg_out->forward(reg_tower->forward(x));
  if (apply_scale) reg = reg * scales[level];
  return {cls, reg};
}

HeadOutput HeadImpl::forward(const PyramidFeatures& pyramid) {
  if (static_cast<int64_t>(pyramid.maps.size()) != num_levels_) {
    throw ShapeError("head built for " + std::to_string(num_levels_) + " levels, got " +
                     std::to_string(pyramid.maps.size()));
  }
  HeadOutput out;
  std::vector<torch::Tensor> cls_all;
  std::vector<torch::Tensor> reg_all;
  std::vector<std::pair<int64_t, int64_t>> sizes;
  for (int64_t l = 0; l < num_levels_; ++l) {
    const auto& x = pyramid.maps[l];
    auto [cls, reg] = forward_level(x, l);
    const int64_t n = x.size(0);
    const int64_t h = x.size(2);
    const int64_t w = x.size(3);
    cls_all.push_back(cls.permute({0, 2, 3, 1}).reshape({n, h * w, spec_.num_classes}));
    reg_all.push_back(reg.permute({0, 2, 3, 1}).reshape({n, h * w, 4, spec_.points()}));
    sizes.emplace_back(h, w);
    out.level_sizes.push_back(h * w);
  }
  out.class_logits = torch::cat(cls_all, 1);
  out.edge_logits = torch::cat(reg_all, 1);
  std::tie(out.locations, out.strides) = level_locations(sizes, pyramid.strides);
  return out;
}

torch::Tensor distribution_expectation(const torch::Tensor& edge_logits, const HeadSpec& spec) {
  if (edge_logits.size(-1) != spec.points()) {
    throw ShapeError("edge logits last dim must be n+1 = " + std::to_string(spec.points()) + ", got " +
                     c10::str(edge_logits.sizes()));
  }
  auto probs = torch::softmax(edge_logits, -1);
  return (probs * bin_points(spec, edge_logits.options())).sum(-1);
}

torch::Tensor decode_boxes(const torch::Tensor& locations, const torch::Tensor& strides,
                           const torch::Tensor& distances, std::optional<std::pair<int64_t, int64_t>> image_hw) {
  auto x = locations.select(-1, 0);
  auto y = locations.select(-1, 1);
  auto d = distances * strides.unsqueeze(-1);
  auto boxes = torch::stack({x - d.select(-1, 2), y - d.select(-1, 0), x + d.select(-1, 3), y + d.select(-1, 1)}, -1);
  if (image_hw) {
    const auto [h, w] = *image_hw;
    auto lim = torch::tensor({static_cast<double>(w), static_cast<double>(h), static_cast<double>(w),
                              static_cast<double>(h)},
                             boxes.options());
    boxes = torch::max(torch::min(boxes, lim), torch::zeros_like(lim));
  }
  return boxes;
}

torch::Tensor encode_boxes(const torch::Tensor& locations, const torch::Tensor& strides, const torch::Tensor& boxes) {
  auto x = locations.select(-1, 0);
  auto y = locations.select(-1, 1);
  auto d = torch::stack({y - boxes.select(-1, 1), boxes.select(-1, 3) - y, x - boxes.select(-1, 0),
                         boxes.select(-1, 2) - x},
                        -1);
  return d / strides.unsqueeze(-1);
}

namespace {

torch::Tensor box_area(const torch::Tensor& b) {
  return (b.select(-1, 2) - b.select(-1, 0)).clamp_min(0) * (b.select(-1, 3) - b.select(-1, 1)).clamp_min(0);
}

}  // namespace

torch::Tensor aligned_iou(const torch::Tensor& a, const torch::Tensor& b) {
  auto lt = torch::max(a.narrow(-1, 0, 2), b.narrow(-1, 0, 2));
  auto rb = torch::min(a.narrow(-1, 2, 2), b.narrow(-1, 2, 2));
  auto wh = (rb - lt).clamp_min(0);
  auto inter = wh.select(-1, 0) * wh.select(-1, 1);
  auto uni = box_area(a) + box_area(b) - inter;
  return inter / uni.clamp_min(1e-9);
}

torch::Tensor pairwise_iou(const torch::Tensor& a, const torch::Tensor& b) {
  return aligned_iou(a.unsqueeze(1), b.unsqueeze(0));
}

std::vector<std::pair<double, double>> default_level_ranges(const std::vector<int64_t>& level_strides) {
  std::vector<std::pair<double, double>> ranges;
  for (size_t l = 0; l < level_strides.size(); ++l) {
    const double s = static_cast<double>(level_strides[l]);
    const double lo = l == 0 ? 0.0 : 4.0 * s;
    const double hi = l + 1 == level_strides.size() ? std::numeric_limits<double>::infinity() : 8.0 * s;
    ranges.emplace_back(lo, hi);
  }
  return ranges;
}

Assignment assign_targets(const torch::Tensor& locations, const torch::Tensor& strides,
                          const std::vector<int64_t>& level_sizes, const std::vector<int64_t>& level_strides,
                          const torch::Tensor& gt_boxes, const torch::Tensor& gt_labels, const AssignOptions& opts) {
  const int64_t num_loc = locations.size(0);
  Assignment a;
  a.labels = torch::full({num_loc}, -1, torch::kInt64);
  a.gt_index = torch::full({num_loc}, -1, torch::kInt64);
  a.target_boxes = torch::zeros({num_loc, 4}, locations.options());
  const int64_t num_gt = gt_boxes.numel() == 0 ? 0 : gt_boxes.size(0);
  if (num_gt == 0) return a;

  auto ranges = opts.ranges.empty() ? default_level_ranges(level_strides) : opts.ranges;
  if (ranges.size() != level_sizes.size()) throw ValidationError("assign_targets: one range per level required");
  std::vector<float> lo_v;
  std::vector<float> hi_v;
  for (size_t l = 0; l < level_sizes.size(); ++l) {
    lo_v.insert(lo_v.end(), level_sizes[l], static_cast<float>(ranges[l].first));
    hi_v.insert(hi_v.end(), level_sizes[l], static_cast<float>(ranges[l].second));
  }
  auto lo = torch::tensor(lo_v).unsqueeze(1);
  auto hi = torch::tensor(hi_v).unsqueeze(1);

  auto boxes = gt_boxes.to(torch::kFloat32);
  auto x = locations.select(1, 0).unsqueeze(1);  // L,1
  auto y = locations.select(1, 1).unsqueeze(1);
  auto x1 = boxes.select(1, 0).unsqueeze(0);  // 1,G
  auto y1 = boxes.select(1, 1).unsqueeze(0);
  auto x2 = boxes.select(1, 2).unsqueeze(0);
  auto y2 = boxes.select(1, 3).unsqueeze(0);
  auto dists = torch::stack({y - y1, y2 - y, x - x1, x2 - x}, -1);  // L,G,4
  auto max_d = std::get<0>(dists.max(-1));
  auto in_range = max_d.ge(lo) & max_d.le(hi);

  auto rad = strides.unsqueeze(1) * opts.center_radius;
  auto cx = (x1 + x2) / 2;
  auto cy = (y1 + y2) / 2;
  auto cl = torch::max(cx - rad, x1);
  auto cr = torch::min(cx + rad, x2);
  auto ct = torch::max(cy - rad, y1);
  auto cb = torch::min(cy + rad, y2);
  auto in_center = x.gt(cl) & x.lt(cr) & y.gt(ct) & y.lt(cb);
  auto inside = std::get<0>(dists.min(-1)).gt(0);

  auto candidate = in_range & in_center & inside;
  auto area = ((x2 - x1) * (y2 - y1)).expand({num_loc, num_gt});
  auto cost = torch::where(candidate, area, torch::full_like(area, std::numeric_limits<float>::infinity()));
  auto [min_area, idx] = cost.min(1);
  auto pos = torch::isfinite(min_area);
  a.gt_index = torch::where(pos, idx, a.gt_index);
  a.labels = torch::where(pos, gt_labels.to(torch::kInt64).index_select(0, idx), a.labels);
  a.target_boxes = torch::where(pos.unsqueeze(1), boxes.index_select(0, idx), a.target_boxes);
  return a;
}

std::vector<Detection> postprocess(const torch::Tensor& scores, const torch::Tensor& boxes,
                                   const PostprocessOptions& opts) {
  auto s = scores.detach().to(torch::kFloat32).contiguous();
  auto b = boxes.detach().to(torch::kFloat32).contiguous();
  const int64_t num_loc = s.size(0);
  const int64_t num_cls = s.size(1);
  auto sa = s.accessor<float, 2>();
  auto ba = b.accessor<float, 2>();

  auto iou = [&](int64_t i, int64_t j) {
    const float ix1 = std::max(ba[i][0], ba[j][0]);
    const float iy1 = std::max(ba[i][1], ba[j][1]);
    const float ix2 = std::min(ba[i][2], ba[j][2]);
    const float iy2 = std::min(ba[i][3], ba[j][3]);
    const float inter = std::max(0.f, ix2 - ix1) * std::max(0.f, iy2 - iy1);
    const float ai = std::max(0.f, ba[i][2] - ba[i][0]) * std::max(0.f, ba[i][3] - ba[i][1]);
    const float aj = std::max(0.f, ba[j][2] - ba[j][0]) * std::max(0.f, ba[j][3] - ba[j][1]);
    const float uni = ai + aj - inter;
    return uni > 0.f ? inter / uni : 0.f;
  };

  std::vector<Detection> dets;
  for (int64_t c = 0; c < num_cls; ++c) {
    std::vector<int64_t> cand;
    for (int64_t i = 0; i < num_loc; ++i) {
      if (sa[i][c] >= opts.score_threshold && ba[i][2] > ba[i][0] && ba[i][3] > ba[i][1]) cand.push_back(i);
    }
    std::stable_sort(cand.begin(), cand.end(), [&](int64_t i, int64_t j) { return sa[i][c] > sa[j][c]; });
    std::vector<int64_t> kept;
    for (auto i : cand) {
      bool suppressed = false;
      for (auto k : kept) {
        if (iou(i, k) > opts.nms_iou) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) kept.push_back(i);
    }
    for (auto i : kept) {
      dets.push_back(Detection{{ba[i][0], ba[i][1], ba[i][2], ba[i][3]}, c, sa[i][c]});
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int64_t>(dets.size()) > opts.top_k) dets.resize(opts.top_k);
  return dets;
}

void write_detections_jsonl(std::ostream& os, const std::string& image_id, const std::vector<Detection>& dets) {
  for (const auto& d : dets) {
    nlohmann::json j{{"image_id", image_id},
                     {"box", {d.box[0], d.box[1], d.box[2], d.box[3]}},
                     {"class", d.class_id},
                     {"score", d.score}};
    os << j.dump() << '\n';
  }
}

}  // namespace hsd
