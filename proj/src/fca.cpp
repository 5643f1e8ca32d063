#include "hsd/fca.hpp"

#include "hsd/errors.hpp"

#include <algorithm>

namespace hsd {

void FcaSpec::validate() const {
  if (channels <= 0) throw ValidationError("FcaSpec.channels: must be positive");
  if (reduction <= 0) throw ValidationError("FcaSpec.reduction: must be positive");
  if (min_bottleneck <= 0) throw ValidationError("FcaSpec.min_bottleneck: must be positive");
}

int64_t FcaSpec::bottleneck() const { return std::max(channels / reduction, min_bottleneck); }

int64_t FcaSpec::closed_form_params() const {
  const int64_t mid = bottleneck();
  return (channels * mid + mid) + 2 * mid + 2 * (mid * channels + channels);
}

DirectionalEncoding directional_pool(const torch::Tensor& x) {
  if (x.dim() != 4) throw ShapeError("directional_pool expects a rank-4 map, got " + c10::str(x.sizes()));
  if (x.size(2) == 0 || x.size(3) == 0) {
    throw ShapeError("directional_pool: zero-size spatial dim " + c10::str(x.sizes()));
  }
  return {x.mean(3, /*keepdim=*/true), x.mean(2, /*keepdim=*/true)};
}

FcaImpl::FcaImpl(const FcaSpec& spec) : spec_(spec) {
  spec_.validate();
  const int64_t mid = spec_.bottleneck();
  f1 = register_module("f1", torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.channels, mid, 1)));
  bn = register_module("bn", torch::nn::BatchNorm2d(mid));
  f_h = register_module("f_h", torch::nn::Conv2d(torch::nn::Conv2dOptions(mid, spec_.channels, 1)));
  f_w = register_module("f_w", torch::nn::Conv2d(torch::nn::Conv2dOptions(mid, spec_.channels, 1)));
}

std::pair<torch::Tensor, torch::Tensor> FcaImpl::gates(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.channels) {
    throw ShapeError("FCA expects (N," + std::to_string(spec_.channels) + ",H,W), got " + c10::str(x.sizes()));
  }
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);
  auto enc = directional_pool(x);
  auto stacked = torch::cat({enc.z_h, enc.z_w.permute({0, 1, 3, 2})}, 2);  // N,C,H+W,1
  auto y = torch::hardswish(bn->forward(f1->forward(stacked)));
  auto parts = y.split_with_sizes({h, w}, 2);
  auto g_h = torch::sigmoid(f_h->forward(parts[0]));
  auto g_w = torch::sigmoid(f_w->forward(parts[1].permute({0, 1, 3, 2})));
  return {g_h, g_w};
}

torch::Tensor FcaImpl::forward(const torch::Tensor& x) {
  auto [g_h, g_w] = gates(x);
  return x * g_h * g_w;
}

}  // namespace hsd
