#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace hsd {

struct FcaSpec {
  int64_t channels = 64;
  int64_t reduction = 32;
  int64_t min_bottleneck = 8;

  void validate() const;
  int64_t bottleneck() const;
  // F1 (conv + bias) + batch norm affine + F_h + F_w (conv + bias).
  int64_t closed_form_params() const;
};

// Row means (z_h, shape N,C,H,1) and column means (z_w, shape N,C,1,W).
struct DirectionalEncoding {
  torch::Tensor z_h;
  torch::Tensor z_w;
};

DirectionalEncoding directional_pool(const torch::Tensor& x);

// Feature coordinate attention.
//
//   z_h, z_w   = directional_pool(x)
//   y          = hardswish(bn(F1(concat(z_h, z_w^T) along the spatial axis)))
//   y_h, y_w   = split(y, [H, W])
//   g_h        = sigmoid(F_h(y_h))      (N,C,H,1)
//   g_w        = sigmoid(F_w(y_w^T))    (N,C,1,W)
//   out        = x * g_h * g_w
class FcaImpl : public torch::nn::Module {
 public:
  explicit FcaImpl(const FcaSpec& spec);

  torch::Tensor forward(const torch::Tensor& x);

  // Row and column gates for `x`, each in (0,1).
  std::pair<torch::Tensor, torch::Tensor> gates(const torch::Tensor& x);

  const FcaSpec& spec() const { return spec_; }

  torch::nn::Conv2d f1{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
  torch::nn::Conv2d f_h{nullptr};
  torch::nn::Conv2d f_w{nullptr};

 private:
  FcaSpec spec_;
};
TORCH_MODULE(Fca);

}  // namespace hsd
