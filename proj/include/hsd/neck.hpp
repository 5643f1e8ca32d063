#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "hsd/core_nn.hpp"
#include "hsd/fca.hpp"

namespace hsd {

enum class Smoothing { none, ds_conv_k3, ds_conv_k5, ds_conv_k7, standard_k3 };

std::string to_string(Smoothing s);
Smoothing smoothing_from_string(const std::string& s);

struct NeckSpec {
  int64_t out_channels = 64;
  // 5 => P3..P7. 3 and 4 exist for the level-count ablation rows.
  int64_t levels = 5;
  bool fca_enabled = true;
  Smoothing smoothing = Smoothing::ds_conv_k7;
  int64_t fca_reduction = 32;
  int64_t fca_min_bottleneck = 8;

  void validate() const;
  // Short row label, e.g. "P3-P7+FCA+DS7".
  std::string label() const;
  bool operator==(const NeckSpec&) const = default;
};

struct PyramidFeatures {
  std::vector<torch::Tensor> maps;  // P3, P4, ...
  std::vector<int64_t> strides;     // 8, 16, ...
};

// Lateral 1x1 -> optional FCA -> top-down nearest x2 upsample + add -> smoothing.
// Extra levels: P6 = conv3x3/s2(P5), P7 = conv3x3/s2(relu(P6)).
class NeckImpl : public torch::nn::Module {
 public:
  NeckImpl(const NeckSpec& spec, std::vector<int64_t> in_channels);

  PyramidFeatures forward(const std::vector<torch::Tensor>& feats);

  const NeckSpec& spec() const { return spec_; }

  torch::nn::ModuleList lateral{nullptr};
  torch::nn::ModuleList attention{nullptr};  // empty when FCA is disabled
  torch::nn::ModuleList smooth{nullptr};     // empty when smoothing is none
  torch::nn::ModuleList extra{nullptr};

 private:
  NeckSpec spec_;
  std::vector<int64_t> in_channels_;
};
TORCH_MODULE(Neck);

Neck build_neck(const NeckSpec& spec, const std::vector<int64_t>& in_channels);

// Spec for the post-fusion smoothing conv, or nullopt for Smoothing::none.
std::optional<ConvSpec> smoothing_conv_spec(Smoothing s, int64_t channels);

// Neck ablation rows in table order: P3-P5, P3-P6, P3-P7, +DS3, +DS5, +DS7, +FCA, +FCA+DS7.
std::vector<NeckSpec> neck_ablation_variants(const NeckSpec& base);

}  // namespace hsd
