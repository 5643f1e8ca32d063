#include "hsd/neck.hpp"

#include "hsd/errors.hpp"

namespace hsd {

namespace F = torch::nn::functional;

std::string to_string(Smoothing s) {
  switch (s) {
    case Smoothing::none: return "none";
    case Smoothing::ds_conv_k3: return "ds_conv_k3";
    case Smoothing::ds_conv_k5: return "ds_conv_k5";
    case Smoothing::ds_conv_k7: return "ds_conv_k7";
    case Smoothing::standard_k3: return "standard_k3";
  }
  return "?";
}

Smoothing smoothing_from_string(const std::string& s) {
  for (auto v : {Smoothing::none, Smoothing::ds_conv_k3, Smoothing::ds_conv_k5, Smoothing::ds_conv_k7,
                 Smoothing::standard_k3}) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown smoothing '" + s +
                        "' (expected none, ds_conv_k3, ds_conv_k5, ds_conv_k7, standard_k3)");
}

void NeckSpec::validate() const {
  if (out_channels <= 0) throw ValidationError("NeckSpec.out_channels: must be positive");
  if (levels < 3 || levels > 5) {
    throw ValidationError("NeckSpec.levels: must be 3, 4 or 5, got " + std::to_string(levels));
  }
}

std::string NeckSpec::label() const {
  std::string s = "P3-P" + std::to_string(2 + levels);
  if (fca_enabled) s += "+FCA";
  switch (smoothing) {
    case Smoothing::ds_conv_k3: s += "+DS3"; break;
    case Smoothing::ds_conv_k5: s += "+DS5"; break;
    case Smoothing::ds_conv_k7: s += "+DS7"; break;
    case Smoothing::none: s += "+nosmooth"; break;
    case Smoothing::standard_k3: break;
  }
  return s;
}

std::optional<ConvSpec> smoothing_conv_spec(Smoothing s, int64_t channels) {
  ConvSpec spec{channels, channels, 3, 1};
  spec.normalization = Normalization::none;
  spec.activation = Activation::none;
  spec.bias = true;
  switch (s) {
    case Smoothing::none: return std::nullopt;
    case Smoothing::standard_k3: return spec;
    case Smoothing::ds_conv_k3: spec.depthwise_separable = true; return spec;
    case Smoothing::ds_conv_k5: spec.depthwise_separable = true; spec.kernel = 5; return spec;
    case Smoothing::ds_conv_k7: spec.depthwise_separable = true; spec.kernel = 7; return spec;
  }
  return std::nullopt;
}

NeckImpl::NeckImpl(const NeckSpec& spec, std::vector<int64_t> in_channels)
    : spec_(spec), in_channels_(std::move(in_channels)) {
  spec_.validate();
  if (in_channels_.size() != 3) {
    throw ShapeError("neck expects 3 input channel counts (C3..C5), got " + std::to_string(in_channels_.size()));
  }
  lateral = register_module("lateral", torch::nn::ModuleList());
  attention = register_module("attention", torch::nn::ModuleList());
  smooth = register_module("smooth", torch::nn::ModuleList());
  extra = register_module("extra", torch::nn::ModuleList());

  for (auto c : in_channels_) {
    ConvSpec lat{c, spec_.out_channels, 1, 1};
    lat.normalization = Normalization::none;
    lat.activation = Activation::none;
    lat.bias = true;
    lateral->push_back(ConvUnit(lat));
    if (spec_.fca_enabled) {
      attention->push_back(Fca(FcaSpec{spec_.out_channels, spec_.fca_reduction, spec_.fca_min_bottleneck}));
    }
    if (auto s = smoothing_conv_spec(spec_.smoothing, spec_.out_channels)) {
      smooth->push_back(ConvUnit(*s));
    }
  }
  for (int64_t i = 3; i < spec_.levels; ++i) {
    ConvSpec down{spec_.out_channels, spec_.out_channels, 3, 2};
    down.normalization = Normalization::none;
    down.activation = Activation::none;
    down.bias = true;
    extra->push_back(ConvUnit(down));
  }
  init_weights(*this);
}

PyramidFeatures NeckImpl::forward(const std::vector<torch::Tensor>& feats) {
  if (feats.size() != 3) {
    throw ShapeError("neck expects 3 input maps (C3..C5), got " + std::to_string(feats.size()));
  }
  std::vector<torch::Tensor> lat;
  for (size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].dim() != 4 || feats[i].size(1) != in_channels_[i]) {
      throw ShapeError("neck input " + std::to_string(i) + " expects " + std::to_string(in_channels_[i]) +
                       " channels, got " + c10::str(feats[i].sizes()));
    }
    auto x = lateral[i]->as<ConvUnitImpl>()->forward(feats[i]);
    if (spec_.fca_enabled) x = attention[i]->as<FcaImpl>()->forward(x);
    lat.push_back(x);
  }
  for (int i = static_cast<int>(lat.size()) - 2; i >= 0; --i) {
    auto opts = F::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{lat[i].size(2), lat[i].size(3)})
                    .mode(torch::kNearest);
    lat[i] = lat[i] + F::interpolate(lat[i + 1], opts);
  }
  PyramidFeatures out;
  int64_t stride = 8;
  for (size_t i = 0; i < lat.size(); ++i, stride *= 2) {
    out.maps.push_back(smooth->is_empty() ? lat[i] : smooth[i]->as<ConvUnitImpl>()->forward(lat[i]));
    out.strides.push_back(stride);
  }
  for (size_t i = 0; i < extra->size(); ++i, stride *= 2) {
    auto src = i == 0 ? out.maps.back() : torch::relu(out.maps.back());
    out.maps.push_back(extra[i]->as<ConvUnitImpl>()->forward(src));
    out.strides.push_back(stride);
  }
  return out;
}

Neck build_neck(const NeckSpec& spec, const std::vector<int64_t>& in_channels) { return Neck(spec, in_channels); }

std::vector<NeckSpec> neck_ablation_variants(const NeckSpec& base) {
  auto make = [&](int64_t levels, bool fca, Smoothing s) {
    NeckSpec v = base;
    v.levels = levels;
    v.fca_enabled = fca;
    v.smoothing = s;
    return v;
  };
  return {
      make(3, false, Smoothing::standard_k3),
      make(4, false, Smoothing::standard_k3),
      make(5, false, Smoothing::standard_k3),
      make(5, false, Smoothing::ds_conv_k3),
      make(5, false, Smoothing::ds_conv_k5),
      make(5, false, Smoothing::ds_conv_k7),
      make(5, true, Smoothing::standard_k3),
      make(5, true, Smoothing::ds_conv_k7),
  };
}

}  // namespace hsd
