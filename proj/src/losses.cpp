#include "hsd/losses.hpp"

#include "hsd/errors.hpp"

#include <cmath>
#include <cstdio>

namespace hsd {

void LossWeights::validate() const {
  if (!(tau > 0)) throw ValidationError("LossWeights.tau: must be > 0, got " + std::to_string(tau));
  if (hkd_weight < 0) throw ValidationError("LossWeights.hkd_weight: must be >= 0");
  if (lambda1 < 0 || lambda2 < 0) throw ValidationError("LossWeights: lambda1/lambda2 must be >= 0");
}

torch::Tensor fcl(const torch::Tensor& logits, const torch::Tensor& quality_targets, int64_t num_positives,
                  double beta) {
  if (logits.sizes() != quality_targets.sizes()) {
    throw ShapeError("fcl: logits " + c10::str(logits.sizes()) + " vs targets " + c10::str(quality_targets.sizes()));
  }
  if (quality_targets.numel() > 0 &&
      (quality_targets.min().item<double>() < 0.0 || quality_targets.max().item<double>() > 1.0)) {
    throw ValidationError("fcl: quality targets must lie in [0,1]");
  }
  auto q = quality_targets.to(logits.dtype());
  auto bce = torch::binary_cross_entropy_with_logits(logits, q, {}, {}, at::Reduction::None);
  auto modulator = (q - logits.sigmoid()).abs().pow(beta);
  return (bce * modulator).sum() / static_cast<double>(std::max<int64_t>(1, num_positives));
}

torch::Tensor fdl(const torch::Tensor& edge_logits, const torch::Tensor& target, const HeadSpec& spec,
                  int64_t* clamped) {
  if (edge_logits.size(-1) != spec.points()) {
    throw ShapeError("fdl: logits last dim must be n+1 = " + std::to_string(spec.points()));
  }
  if (target.numel() == 0) return edge_logits.sum() * 0;
  auto t = target.to(edge_logits.dtype());
  if (clamped) *clamped += (t.lt(spec.eps_min) | t.gt(spec.eps_max)).sum().item<int64_t>();
  t = t.clamp(spec.eps_min, spec.eps_max);
  const double delta = spec.bin_width();
  auto left = ((t - spec.eps_min) / delta).floor().clamp(0, spec.bins - 1).to(torch::kInt64);
  auto right = left + 1;
  auto eps_left = left.to(t.dtype()) * delta + spec.eps_min;
  auto w_left = (eps_left + delta - t) / delta;
  auto w_right = (t - eps_left) / delta;
  auto logp = torch::log_softmax(edge_logits, -1);
  auto lp_left = logp.gather(-1, left.unsqueeze(-1)).squeeze(-1);
  auto lp_right = logp.gather(-1, right.unsqueeze(-1)).squeeze(-1);
  return -(w_left * lp_left + w_right * lp_right).mean();
}

torch::Tensor giou(const torch::Tensor& pred, const torch::Tensor& target) {
  auto area = [](const torch::Tensor& b) {
    return (b.select(-1, 2) - b.select(-1, 0)).clamp_min(0) * (b.select(-1, 3) - b.select(-1, 1)).clamp_min(0);
  };
  auto lt = torch::max(pred.narrow(-1, 0, 2), target.narrow(-1, 0, 2));
  auto rb = torch::min(pred.narrow(-1, 2, 2), target.narrow(-1, 2, 2));
  auto wh = (rb - lt).clamp_min(0);
  auto inter = wh.select(-1, 0) * wh.select(-1, 1);
  auto uni = area(pred) + area(target) - inter;
  auto iou = inter / uni.clamp_min(1e-9);
  auto elt = torch::min(pred.narrow(-1, 0, 2), target.narrow(-1, 0, 2));
  auto erb = torch::max(pred.narrow(-1, 2, 2), target.narrow(-1, 2, 2));
  auto ewh = (erb - elt).clamp_min(0);
  auto enclose = (ewh.select(-1, 0) * ewh.select(-1, 1)).clamp_min(1e-9);
  return iou - (enclose - uni) / enclose;
}

torch::Tensor frl_giou(const torch::Tensor& pred_boxes, const torch::Tensor& target_boxes,
                       const torch::Tensor& weights) {
  if (pred_boxes.numel() == 0) return pred_boxes.sum() * 0;
  auto loss = 1 - giou(pred_boxes, target_boxes);
  if (!weights.defined()) return loss.mean();
  auto w = weights.to(loss.dtype());
  return (loss * w).sum() / w.sum().clamp_min(1e-9);
}

torch::Tensor hkd(const torch::Tensor& student_logits, const torch::Tensor& teacher_logits, double tau,
                  const torch::Tensor& distill_mask) {
  if (!(tau > 0)) throw ValidationError("hkd: temperature tau must be > 0, got " + std::to_string(tau));
  if (student_logits.sizes() != teacher_logits.sizes()) {
    throw ShapeError("hkd: student " + c10::str(student_logits.sizes()) + " vs teacher " +
                     c10::str(teacher_logits.sizes()));
  }
  if (student_logits.numel() == 0) return student_logits.sum() * 0;
  auto zt = teacher_logits.detach().to(student_logits.dtype());
  auto log_ps = torch::log_softmax(student_logits / tau, -1);
  auto log_pt = torch::log_softmax(zt / tau, -1);
  auto kl = (log_pt.exp() * (log_pt - log_ps)).sum(-1);
  // Sum over edges: everything but the location axis.
  auto per_loc = kl.dim() > 1 ? kl.flatten(1).sum(1) : kl;
  torch::Tensor total;
  int64_t count = 0;
  if (distill_mask.defined()) {
    auto m = distill_mask.to(torch::kBool);
    total = per_loc.masked_select(m).sum();
    count = m.sum().item<int64_t>();
  } else {
    total = per_loc.sum();
    count = per_loc.size(0);
  }
  return tau * tau * total / static_cast<double>(std::max<int64_t>(1, count));
}

namespace {

double checked(const torch::Tensor& t, const char* name) {
  if (!t.defined()) return 0.0;
  const double v = t.item<double>();
  if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
  return v;
}

}  // namespace

WeightedLoss total_loss(const LossTerms& terms, const LossWeights& weights) {
  WeightedLoss out;
  const double f = checked(terms.fcl, "fcl");
  const double d = checked(terms.fdl, "fdl");
  const double r = checked(terms.frl, "frl");
  const double k = checked(terms.hkd, "hkd");
  out.bundle = total_loss(f, d, r, k, weights);

  torch::Tensor total;
  auto add = [&](const torch::Tensor& t, double w) {
    if (!t.defined() || w == 0.0) return;
    total = total.defined() ? total + w * t : w * t;
  };
  add(terms.fcl, 1.0);
  add(terms.fdl, weights.lambda1);
  add(terms.frl, weights.lambda2);
  add(terms.hkd, weights.hkd_weight);
  out.total = total.defined() ? total : torch::zeros({});
  return out;
}

LossBundle total_loss(double fcl_v, double fdl_v, double frl_v, double hkd_v, const LossWeights& weights) {
  const std::pair<const char*, double> parts[] = {{"fcl", fcl_v}, {"fdl", fdl_v}, {"frl", frl_v}, {"hkd", hkd_v}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
  }
  LossBundle b{fcl_v, fdl_v, frl_v, hkd_v, 0.0};
  b.total = fcl_v + weights.lambda1 * fdl_v + weights.lambda2 * frl_v + weights.hkd_weight * hkd_v;
  return b;
}

LossLog::LossLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw std::runtime_error("cannot open loss log " + path.string());
  out_ << kHeader << '\n';
}

std::string LossLog::format_row(int64_t iteration, const LossBundle& b) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(iteration), b.fcl, b.fdl,
                b.frl, b.hkd, b.total);
  return buf;
}

void LossLog::append(int64_t iteration, const LossBundle& b) {
  rows_.emplace_back(iteration, b);
  if (out_.is_open()) out_ << format_row(iteration, b) << '\n' << std::flush;
}

void LossLog::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  os << kHeader << '\n';
  for (const auto& [it, b] : rows_) os << format_row(it, b) << '\n';
}

}  // namespace hsd
