#include "hsd/core_nn.hpp"

#include "hsd/errors.hpp"

#include <json.hpp>

namespace hsd {

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ValidationError("ConvSpec." + field + ": " + why);
}

}  // namespace

std::string to_string(Normalization n) {
  switch (n) {
    case Normalization::batch_norm: return "batch_norm";
    case Normalization::group_norm: return "group_norm";
    case Normalization::none: return "none";
  }
  return "?";
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }

void ConvSpec::validate() const {
  require(in_channels > 0, "in_channels", "must be positive, got " + std::to_string(in_channels));
  require(out_channels > 0, "out_channels", "must be positive, got " + std::to_string(out_channels));
  require(kernel == 1 || kernel == 3 || kernel == 5 || kernel == 7, "kernel",
          "must be one of {1,3,5,7}, got " + std::to_string(kernel));
  require(stride == 1 || stride == 2, "stride", "must be 1 or 2, got " + std::to_string(stride));
  if (normalization == Normalization::group_norm) {
    require(norm_groups > 0 && out_channels % norm_groups == 0, "norm_groups",
            "must divide out_channels (" + std::to_string(out_channels) + "), got " + std::to_string(norm_groups));
  }
}

int64_t ConvSpec::closed_form_params() const {
  const int64_t k2 = kernel * kernel;
  int64_t n = depthwise_separable ? k2 * in_channels + in_channels * out_channels
                                  : k2 * in_channels * out_channels;
  if (bias) n += out_channels;
  if (normalization != Normalization::none) n += 2 * out_channels;
  return n;
}

ConvUnitImpl::ConvUnitImpl(const ConvSpec& spec) : spec_(spec) {
  spec_.validate();
  const int64_t pad = spec_.kernel / 2;
  if (spec_.depthwise_separable) {
    depthwise = register_module(
        "depthwise", torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.in_channels, spec_.in_channels, spec_.kernel)
                                           .stride(spec_.stride)
                                           .padding(pad)
                                           .groups(spec_.in_channels)
                                           .bias(false)));
    pointwise = register_module(
        "pointwise",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.in_channels, spec_.out_channels, 1).bias(spec_.bias)));
  } else {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.in_channels, spec_.out_channels,
                                                                              spec_.kernel)
                                                         .stride(spec_.stride)
                                                         .padding(pad)
                                                         .bias(spec_.bias)));
  }
  if (spec_.normalization == Normalization::batch_norm) {
    bn = register_module("bn", torch::nn::BatchNorm2d(spec_.out_channels));
  } else if (spec_.normalization == Normalization::group_norm) {
    gn = register_module("gn", torch::nn::GroupNorm(torch::nn::GroupNormOptions(spec_.norm_groups, spec_.out_channels)));
  }
}

torch::Tensor ConvUnitImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw ShapeError("ConvUnit expects (N," + std::to_string(spec_.in_channels) + ",H,W), got " +
                     c10::str(x.sizes()));
  }
  torch::Tensor y = spec_.depthwise_separable ? pointwise->forward(depthwise->forward(x)) : conv->forward(x);
  if (bn) y = bn->forward(y);
  if (gn) y = gn->forward(y);
  if (spec_.activation == Activation::relu) y = torch::relu(y);
  return y;
}

ConvUnit build_conv(const ConvSpec& spec) { return ConvUnit(spec); }

void BackboneSpec::validate() const {
  if (stage_channels.size() < 3) {
    throw ValidationError("BackboneSpec.stage_channels: need at least 3 stages, got " +
                          std::to_string(stage_channels.size()));
  }
  if (stage_channels.size() != blocks_per_stage.size()) {
    throw ValidationError("BackboneSpec.blocks_per_stage: length " + std::to_string(blocks_per_stage.size()) +
                          " differs from stage_channels length " + std::to_string(stage_channels.size()));
  }
  if (stage_channels.size() > 4) {
    throw ValidationError("BackboneSpec.stage_channels: at most 4 stages fit a stride-32 output");
  }
  for (auto c : stage_channels)
    if (c <= 0) throw ValidationError("BackboneSpec.stage_channels: entries must be positive");
  for (auto b : blocks_per_stage)
    if (b <= 0) throw ValidationError("BackboneSpec.blocks_per_stage: entries must be positive");
  if (input_channels <= 0) throw ValidationError("BackboneSpec.input_channels: must be positive");
  if (stem_channels <= 0) throw ValidationError("BackboneSpec.stem_channels: must be positive");
}

BackboneSpec BackboneSpec::desk() { return BackboneSpec{{32, 64, 128}, {1, 1, 1}, 3, 16, 3}; }

BackboneSpec BackboneSpec::resnet18() { return BackboneSpec{{64, 128, 256, 512}, {2, 2, 2, 2}, 3, 64, 7}; }

BasicBlockImpl::BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1 = register_module("conv1", ConvUnit(ConvSpec{in_channels, out_channels, 3, stride}));
  ConvSpec second{out_channels, out_channels, 3, 1};
  second.activation = Activation::none;
  conv2 = register_module("conv2", ConvUnit(second));
  if (stride != 1 || in_channels != out_channels) {
    ConvSpec proj{in_channels, out_channels, 1, stride};
    proj.activation = Activation::none;
    shortcut = register_module("shortcut", ConvUnit(proj));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto identity = shortcut ? shortcut->forward(x) : x;
  return torch::relu(conv2->forward(conv1->forward(x)) + identity);
}

BackboneImpl::BackboneImpl(const BackboneSpec& spec) : spec_(spec) {
  spec_.validate();
  const auto num_stages = static_cast<int64_t>(spec_.stage_channels.size());
  // Stem always downsamples by 2; remaining factor up to stride 2^(5 - stages) comes from max pooling.
  stem_pools_ = 5 - num_stages - 1;
  stem = register_module("stem", ConvUnit(ConvSpec{spec_.input_channels, spec_.stem_channels, spec_.stem_kernel, 2}));
  stages = register_module("stages", torch::nn::ModuleList());
  int64_t in = spec_.stem_channels;
  for (int64_t s = 0; s < num_stages; ++s) {
    torch::nn::Sequential stage;
    const int64_t out = spec_.stage_channels[s];
    for (int64_t b = 0; b < spec_.blocks_per_stage[s]; ++b) {
      stage->push_back(BasicBlock(b == 0 ? in : out, out, b == 0 ? 2 : 1));
    }
    stages->push_back(stage);
    in = out;
  }
  init_weights(*this);
}

std::vector<torch::Tensor> BackboneImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != spec_.input_channels) {
    throw ShapeError("backbone expects (N," + std::to_string(spec_.input_channels) + ",H,W), got " +
                     c10::str(image.sizes()));
  }
  if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
    throw ShapeError("backbone input height/width must be divisible by 32, got " + std::to_string(image.size(2)) +
                     "x" + std::to_string(image.size(3)));
  }
  auto x = stem->forward(image);
  for (int64_t i = 0; i < stem_pools_; ++i) {
    x = torch::max_pool2d(x, {3, 3}, {2, 2}, {1, 1});
  }
  std::vector<torch::Tensor> outs;
  for (size_t s = 0; s < stages->size(); ++s) {
    x = stages[s]->as<torch::nn::SequentialImpl>()->forward(x);
    outs.push_back(x);
  }
  return {outs.end() - 3, outs.end()};
}

std::vector<int64_t> BackboneImpl::out_channels() const {
  return {spec_.stage_channels.end() - 3, spec_.stage_channels.end()};
}

Backbone build_backbone(const BackboneSpec& spec) { return Backbone(spec); }

ParameterReport count_parameters(const torch::nn::Module& model) {
  ParameterReport report;
  for (const auto& p : model.named_parameters(/*recurse=*/false)) {
    report.per_module_counts["(self)"] += p.value().numel();
  }
  for (const auto& child : model.named_children()) {
    int64_t n = 0;
    for (const auto& p : child.value()->parameters()) n += p.numel();
    report.per_module_counts[child.key()] = n;
  }
  for (const auto& [name, n] : report.per_module_counts) report.total_params += n;
  report.model_size_bytes = report.total_params * static_cast<int64_t>(sizeof(float));
  return report;
}

void to_json(nlohmann::json& j, const ParameterReport& r) {
  j = nlohmann::json{{"per_module_counts", r.per_module_counts},
                     {"total_params", r.total_params},
                     {"model_size_bytes", r.model_size_bytes}};
}

void init_weights(torch::nn::Module& model) {
  torch::NoGradGuard no_grad;
  auto init_one = [](torch::nn::Module* m) {
    if (auto* conv = dynamic_cast<torch::nn::Conv2dImpl*>(m)) {
      torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
      if (conv->bias.defined()) torch::nn::init::zeros_(conv->bias);
    } else if (auto* bn = dynamic_cast<torch::nn::BatchNorm2dImpl*>(m)) {
      torch::nn::init::ones_(bn->weight);
      torch::nn::init::zeros_(bn->bias);
    } else if (auto* gn = dynamic_cast<torch::nn::GroupNormImpl*>(m)) {
      torch::nn::init::ones_(gn->weight);
      torch::nn::init::zeros_(gn->bias);
    }
  };
  // modules(true) needs a shared_ptr owner, which a module under construction does not have yet.
  init_one(&model);
  for (auto& m : model.modules(/*include_self=*/false)) init_one(m.get());
}

}  // namespace hsd
