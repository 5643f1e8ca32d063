#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace hsd {

enum class Normalization { batch_norm, group_norm, none };
enum class Activation { relu, none };

// One convolution unit: conv (standard or depthwise-separable) -> norm -> activation.
// Output spatial size is ceil(input / stride) ("same" padding).
struct ConvSpec {
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  int64_t kernel = 3;
  int64_t stride = 1;
  bool depthwise_separable = false;
  Normalization normalization = Normalization::batch_norm;
  Activation activation = Activation::relu;
  // Conv bias on the last conv stage. Off by default; norm layers carry the shift.
  bool bias = false;
  // Groups for group_norm.
  int64_t norm_groups = 8;

  // Throws ValidationError naming the offending field.
  void validate() const;
  // Closed-form trainable value count (weights + bias + norm affine).
  int64_t closed_form_params() const;
};

class ConvUnitImpl : public torch::nn::Module {
 public:
  explicit ConvUnitImpl(const ConvSpec& spec);

  torch::Tensor forward(const torch::Tensor& x);

  const ConvSpec& spec() const { return spec_; }

  // Standard path: `conv`. DS path: `depthwise` then `pointwise`.
  torch::nn::Conv2d conv{nullptr};
  torch::nn::Conv2d depthwise{nullptr};
  torch::nn::Conv2d pointwise{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
  torch::nn::GroupNorm gn{nullptr};

 private:
  ConvSpec spec_;
};
TORCH_MODULE(ConvUnit);

ConvUnit build_conv(const ConvSpec& spec);

// Residual backbone. The stem reduces the input to stride 2^(5 - stages); every
// stage then halves the resolution, so the last three stages sit at strides 8/16/32.
struct BackboneSpec {
  std::vector<int64_t> stage_channels;
  std::vector<int64_t> blocks_per_stage;
  int64_t input_channels = 3;
  int64_t stem_channels = 16;
  int64_t stem_kernel = 3;

  void validate() const;

  // 3 stages, 32/64/128 channels, one basic block each.
  static BackboneSpec desk();
  // ResNet-18 channel and block plan.
  static BackboneSpec resnet18();
};

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ConvUnit conv1{nullptr};
  ConvUnit conv2{nullptr};
  ConvUnit shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneSpec& spec);

  // Returns [C3, C4, C5]. Throws ShapeError if H or W is not divisible by 32.
  std::vector<torch::Tensor> forward(const torch::Tensor& image);

  const BackboneSpec& spec() const { return spec_; }
  std::vector<int64_t> out_channels() const;

 private:
  BackboneSpec spec_;
  ConvUnit stem{nullptr};
  int64_t stem_pools_ = 0;
  torch::nn::ModuleList stages{nullptr};
};
TORCH_MODULE(Backbone);

Backbone build_backbone(const BackboneSpec& spec);

struct ParameterReport {
  std::map<std::string, int64_t> per_module_counts;
  int64_t total_params = 0;
  int64_t model_size_bytes = 0;  // total_params * sizeof(float)
};

ParameterReport count_parameters(const torch::nn::Module& model);

void to_json(nlohmann::json& j, const ParameterReport& r);

// Kaiming fan-out for conv weights, zero bias, unit/zero norm affine.
void init_weights(torch::nn::Module& model);

std::string to_string(Normalization n);
std::string to_string(Activation a);

}  // namespace hsd
