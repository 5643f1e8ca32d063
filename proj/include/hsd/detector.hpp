#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include <json.hpp>

#include "hsd/core_nn.hpp"
#include "hsd/head.hpp"
#include "hsd/neck.hpp"

namespace hsd {

struct DetectorSpec {
  BackboneSpec backbone;
  NeckSpec neck;
  HeadSpec head;

  void validate() const;

  // Desk-scale network: small residual backbone, 64-channel neck, 2-conv head towers.
  static DetectorSpec desk(bool fca, Smoothing smoothing);
  // ResNet-18 backbone, 256-channel neck, 4-conv head towers.
  static DetectorSpec paper(bool fca, Smoothing smoothing);
};

void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);
void to_json(nlohmann::json& j, const NeckSpec& s);
void from_json(const nlohmann::json& j, NeckSpec& s);
void to_json(nlohmann::json& j, const HeadSpec& s);
void from_json(const nlohmann::json& j, HeadSpec& s);
void to_json(nlohmann::json& j, const DetectorSpec& s);
void from_json(const nlohmann::json& j, DetectorSpec& s);

class DetectorImpl : public torch::nn::Module {
 public:
  explicit DetectorImpl(const DetectorSpec& spec);

  HeadOutput forward(const torch::Tensor& images);

  // Eval-time decode + postprocess, one detection list per image.
  std::vector<std::vector<Detection>> predict(const torch::Tensor& images, const PostprocessOptions& opts);

  const DetectorSpec& spec() const { return spec_; }

  Backbone backbone{nullptr};
  Neck neck{nullptr};
  Head head{nullptr};

 private:
  DetectorSpec spec_;
};
TORCH_MODULE(Detector);

// Hash of the architecture: spec JSON plus every parameter/buffer name and shape.
std::string architecture_fingerprint(DetectorImpl& model);

// Hash of all parameter values (bitwise). Used to prove a frozen model stayed frozen.
std::string parameter_hash(const torch::nn::Module& model);

}  // namespace hsd
