#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hsd/head.hpp"

namespace hsd {

struct LossWeights {
  double lambda1 = 0.25;  // distribution loss
  double lambda2 = 2.0;   // GIoU regression loss
  double tau = 15.0;      // distillation temperature
  double hkd_weight = 1.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

// Scalar values of one evaluation of the objective.
struct LossBundle {
  double fcl = 0;
  double fdl = 0;
  double frl = 0;
  double hkd = 0;
  double total = 0;
};

// Differentiable components; any may be undefined, meaning zero.
struct LossTerms {
  torch::Tensor fcl;
  torch::Tensor fdl;
  torch::Tensor frl;
  torch::Tensor hkd;
};

// Quality focal loss on sigmoid scores against soft IoU targets:
//   sum |q - sigmoid(s)|^beta * BCE(sigmoid(s), q) / max(1, num_positives)
// logits and quality_targets have the same shape; negatives carry q = 0.
torch::Tensor fcl(const torch::Tensor& logits, const torch::Tensor& quality_targets, int64_t num_positives,
                  double beta = 2.0);

// Two-bin cross-entropy on the bins bracketing each target edge distance.
// edge_logits (P, 4, n+1), target (P, 4) in stride units. Targets outside [eps_min, eps_max]
// are clamped; `clamped` (optional) accumulates how many were.
torch::Tensor fdl(const torch::Tensor& edge_logits, const torch::Tensor& target, const HeadSpec& spec,
                  int64_t* clamped = nullptr);

// Generalized IoU of aligned (..., 4) boxes.
torch::Tensor giou(const torch::Tensor& pred, const torch::Tensor& target);

// sum_i w_i (1 - GIoU_i) / sum_i w_i ; unweighted mean when weights is undefined.
torch::Tensor frl_giou(const torch::Tensor& pred_boxes, const torch::Tensor& target_boxes,
                       const torch::Tensor& weights = {});

// tau^2 * sum over edges and masked locations of KL(softmax(z_T/tau) || softmax(z_S/tau)) / max(1, #masked).
// Logits (P, 4, n+1) or (P, n+1); mask (P) bool, undefined = all. Teacher logits are detached.
torch::Tensor hkd(const torch::Tensor& student_logits, const torch::Tensor& teacher_logits, double tau,
                  const torch::Tensor& distill_mask = {});

struct WeightedLoss {
  torch::Tensor total;
  LossBundle bundle;
};

// total = fcl + lambda1*fdl + lambda2*frl + hkd_weight*hkd. Throws NonFiniteLoss naming the component.
WeightedLoss total_loss(const LossTerms& terms, const LossWeights& weights);

// Scalar form of the same weighted sum.
LossBundle total_loss(double fcl, double fdl, double frl, double hkd, const LossWeights& weights);

// Loss-curve log: header "iteration,fcl,fdl,frl,hkd,total".
class LossLog {
 public:
  static constexpr const char* kHeader = "iteration,fcl,fdl,frl,hkd,total";

  LossLog() = default;
  explicit LossLog(const std::filesystem::path& path);

  void append(int64_t iteration, const LossBundle& b);
  const std::vector<std::pair<int64_t, LossBundle>>& rows() const { return rows_; }
  void write(const std::filesystem::path& path) const;

  static std::string format_row(int64_t iteration, const LossBundle& b);

 private:
  std::vector<std::pair<int64_t, LossBundle>> rows_;
  std::ofstream out_;
};

}  // namespace hsd
