#include <doctest.h>

#include <torch/torch.h>

#include <random>
#include <set>

#include "hsd/core_nn.hpp"
#include "hsd/detector.hpp"
#include "hsd/errors.hpp"
#include "hsd/fca.hpp"
#include "hsd/head.hpp"
#include "hsd/neck.hpp"
#include "oracles.hpp"

using namespace hsd;

TEST_CASE("conv unit parameter counts follow the closed form") {
  ConvSpec s{256, 256, 3, 1, false, Normalization::none, Activation::none};
  auto conv = build_conv(s);
  auto rep = count_parameters(*conv);
  CHECK(rep.total_params == 589824);
  CHECK(rep.model_size_bytes == 2359296);
  s.depthwise_separable = true;
  CHECK(count_parameters(*build_conv(s)).total_params == 67840);

  std::mt19937 rng(3);
  for (int k = 0; k < 40; ++k) {
    ConvSpec r;
    r.in_channels = 8 * (1 + static_cast<int64_t>(rng() % 32));
    r.out_channels = 8 * (1 + static_cast<int64_t>(rng() % 32));
    r.kernel = std::vector<int64_t>{1, 3, 5, 7}[rng() % 4];
    r.depthwise_separable = rng() % 2;
    r.bias = rng() % 2;
    r.normalization = std::vector<Normalization>{Normalization::batch_norm, Normalization::group_norm,
                                                 Normalization::none}[rng() % 3];
    CHECK(count_parameters(*build_conv(r)).total_params == r.closed_form_params());
  }
}

TEST_CASE("conv unit shapes and validation") {
  ConvSpec s{4, 4, 1, 1, false, Normalization::none, Activation::none};
  auto conv = build_conv(s);
  CHECK((conv->forward(torch::randn({1, 4, 5, 7})).sizes() == torch::IntArrayRef({1, 4, 5, 7})));

  ConvSpec ds{6, 6, 7, 1, true, Normalization::none, Activation::none};
  auto dsc = build_conv(ds);
  {
    torch::NoGradGuard ng;
    dsc->pointwise->weight.zero_();
    for (int64_t c = 0; c < 6; ++c) dsc->pointwise->weight[c][c][0][0] = 1.0;
  }
  // Interior of a constant field stays constant (padding touches only the border).
  auto y = dsc->forward(torch::full({1, 6, 16, 16}, 2.0));
  auto inner = y.narrow(2, 3, 10).narrow(3, 3, 10);
  for (int64_t c = 0; c < 6; ++c) {
    auto ch = inner[0][c];
    CHECK((ch - ch[0][0]).abs().max().item<double>() < 1e-5);
  }

  ConvSpec bad = s;
  bad.kernel = 4;
  CHECK_THROWS_AS(build_conv(bad), ValidationError);
  bad = s;
  bad.in_channels = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK(count_parameters(torch::nn::Module()).total_params == 0);
}

TEST_CASE("backbone strides") {
  auto bb = build_backbone(BackboneSpec::desk());
  bb->eval();
  torch::NoGradGuard ng;
  auto img = torch::randn({1, 3, 256, 256}).repeat({4, 1, 1, 1});
  auto maps = bb->forward(img);
  REQUIRE(maps.size() == 3);
  CHECK(maps[0].size(2) == 32);
  CHECK(maps[1].size(2) == 16);
  CHECK(maps[2].size(2) == 8);
  CHECK((maps[2][0] - maps[2][3]).abs().max().item<double>() < 1e-5);
  CHECK_THROWS_AS(bb->forward(torch::randn({1, 3, 100, 96})), ShapeError);

  auto r18 = build_backbone(BackboneSpec::resnet18());
  r18->eval();
  auto m = r18->forward(torch::zeros({1, 3, 512, 704}));
  CHECK((m[0].sizes() == torch::IntArrayRef({1, 128, 64, 88})));
  CHECK((m[1].sizes() == torch::IntArrayRef({1, 256, 32, 44})));
  CHECK((m[2].sizes() == torch::IntArrayRef({1, 512, 16, 22})));
}

TEST_CASE("directional pooling") {
  auto x = torch::tensor({1.0, 2.0, 3.0, 4.0}).view({1, 1, 2, 2});
  auto e = directional_pool(x);
  CHECK(e.z_h.flatten()[0].item<double>() == doctest::Approx(1.5));
  CHECK(e.z_h.flatten()[1].item<double>() == doctest::Approx(3.5));
  CHECK(e.z_w.flatten()[0].item<double>() == doctest::Approx(2.0));
  CHECK(e.z_w.flatten()[1].item<double>() == doctest::Approx(3.0));
  auto c = directional_pool(torch::full({2, 3, 4, 5}, 1.25));
  CHECK((c.z_h - 1.25).abs().max().item<double>() == 0.0);
  CHECK((c.z_w.sizes() == torch::IntArrayRef({2, 3, 1, 5})));
  CHECK_THROWS_AS(directional_pool(torch::zeros({1, 1, 0, 3})), ShapeError);
}

TEST_CASE("coordinate attention gates") {
  Fca fca(FcaSpec{16, 4, 4});
  fca->eval();
  {
    torch::NoGradGuard ng;
    fca->f_h->weight.zero_();
    fca->f_h->bias.zero_();
    fca->f_w->weight.zero_();
    fca->f_w->bias.zero_();
  }
  auto x = torch::randn({2, 16, 6, 9});
  auto y = fca->forward(x);
  CHECK((y - x / 4).abs().max().item<double>() < 1e-6);

  Fca rnd(FcaSpec{16, 4, 4});
  rnd->eval();
  auto z = rnd->forward(x);
  CHECK((z.abs() <= x.abs() + 1e-7).all().item<bool>());
  CHECK(count_parameters(*rnd).total_params == FcaSpec{16, 4, 4}.closed_form_params());
}

TEST_CASE("neck levels and variants") {
  const std::vector<int64_t> in_ch{32, 64, 128};
  std::vector<torch::Tensor> feats{torch::randn({1, 32, 32, 32}), torch::randn({1, 64, 16, 16}),
                                   torch::randn({1, 128, 8, 8})};
  auto variants = neck_ablation_variants(NeckSpec{});
  REQUIRE(variants.size() == 8);
  std::set<std::string> labels;
  for (const auto& v : variants) {
    labels.insert(v.label());
    auto neck = build_neck(v, in_ch);
    auto out = neck->forward(feats);
    CHECK(static_cast<int64_t>(out.maps.size()) == v.levels);
  }
  CHECK(labels.size() == 8);
  CHECK((variants == neck_ablation_variants(NeckSpec{})));

  NeckSpec full;
  auto out = build_neck(full, in_ch)->forward(feats);
  const std::vector<int64_t> sizes{32, 16, 8, 4, 2};
  for (size_t i = 0; i < 5; ++i) CHECK(out.maps[i].size(2) == sizes[i]);

  NeckSpec k3 = full, k7 = full;
  k3.out_channels = k7.out_channels = 256;
  k3.smoothing = Smoothing::standard_k3;
  k7.smoothing = Smoothing::ds_conv_k7;
  CHECK(count_parameters(*build_neck(k7, in_ch)).total_params < count_parameters(*build_neck(k3, in_ch)).total_params);

  NeckSpec bad;
  bad.levels = 6;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(smoothing_from_string("k9"), ValidationError);
}

TEST_CASE("head outputs, sharing and priors") {
  HeadSpec hs;
  Head head(hs, 5);
  head->eval();
  {
    torch::NoGradGuard ng;
    head->cls_out->weight.zero_();
    head->reg_out->weight.zero_();
    head->reg_out->bias.zero_();
  }
  PyramidFeatures pyr;
  const std::vector<int64_t> sizes{32, 16, 8, 4, 2};
  for (size_t i = 0; i < 5; ++i) {
    pyr.maps.push_back(torch::randn({1, hs.in_channels, sizes[i], sizes[i]}));
    pyr.strides.push_back(8 << i);
  }
  auto out = head->forward(pyr);
  CHECK(out.class_logits.size(1) == 1364);
  const double prior = hs.prior_prob;
  CHECK((out.class_scores() - prior).abs().max().item<double>() < 1e-6);
  auto e = distribution_expectation(out.edge_logits, hs);
  CHECK((e - 8.0).abs().max().item<double>() < 1e-5);

  Head shared(hs, 5);
  shared->eval();
  auto x = torch::randn({1, hs.in_channels, 4, 4});
  auto a = shared->forward_level(x, 0, false);
  auto b = shared->forward_level(x, 1, false);
  CHECK((a.first - b.first).abs().max().item<double>() == 0.0);
  CHECK((a.second - b.second).abs().max().item<double>() == 0.0);
}

TEST_CASE("distribution expectation") {
  HeadSpec hs;
  hs.bins = 4;
  hs.eps_max = 4;
  auto one_hot = torch::full({1, 4, 5}, -1e4);
  one_hot.select(2, 3).fill_(0);
  CHECK(distribution_expectation(one_hot, hs)[0][0].item<double>() == doctest::Approx(3.0));
  CHECK(distribution_expectation(torch::zeros({1, 4, 5}), hs)[0][0].item<double>() == doctest::Approx(2.0));
  auto logits = torch::randn({50, 4, 5}, torch::kFloat64);
  auto e = distribution_expectation(logits, hs);
  for (int64_t i = 0; i < 50; ++i) {
    CHECK(e[i][1].item<double>() == doctest::Approx(oracle::expectation(oracle::to_vec(logits[i][1]), 0, 4)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(distribution_expectation(torch::zeros({1, 4, 7}), hs), ShapeError);
}

TEST_CASE("box codec") {
  auto loc = torch::tensor({100.0f, 80.0f}).view({1, 2});
  auto s = torch::tensor({8.0f});
  auto d = torch::tensor({2.0f, 3.0f, 1.0f, 4.0f}).view({1, 4});
  auto box = decode_boxes(loc, s, d);
  CHECK((oracle::to_vec(box) == std::vector<double>{92, 64, 132, 104}));
  auto zero = decode_boxes(loc, s, torch::zeros({1, 4}));
  CHECK(zero[0][0].item<float>() == zero[0][2].item<float>());

  auto boxes = torch::tensor({90.0f, 70.0f, 130.0f, 100.0f}).view({1, 4});
  auto enc = encode_boxes(loc, s, boxes);
  auto back = decode_boxes(loc, s, enc);
  CHECK((back - boxes).abs().max().item<double>() < 1e-4);
}

TEST_CASE("target assignment") {
  auto [locs, strides] = level_locations({{32, 32}, {16, 16}, {8, 8}, {4, 4}, {2, 2}}, {8, 16, 32, 64, 128});
  const std::vector<int64_t> level_sizes{1024, 256, 64, 16, 4};
  const std::vector<int64_t> level_strides{8, 16, 32, 64, 128};

  auto gt = torch::tensor({78.0f, 78.0f, 178.0f, 178.0f}).view({1, 4});
  auto a = assign_targets(locs, strides, level_sizes, level_strides, gt, torch::tensor({1}, torch::kInt64));
  auto pos = a.positive_mask();
  CHECK(a.num_positives() > 0);
  // Sampled centres sit within 12 px of (128, 128): max edge distance <= 62, the stride-8 range.
  CHECK(pos.narrow(0, 1024, 340).sum().item<int64_t>() == 0);
  CHECK((a.labels.masked_select(pos) == 1).all().item<bool>());

  auto empty = assign_targets(locs, strides, level_sizes, level_strides, torch::zeros({0, 4}),
                              torch::zeros({0}, torch::kInt64));
  CHECK(empty.num_positives() == 0);

  auto nested = torch::tensor({{100.0f, 100.0f, 156.0f, 156.0f}, {116.0f, 116.0f, 140.0f, 140.0f}});
  auto n = assign_targets(locs, strides, level_sizes, level_strides, nested, torch::tensor({0, 1}, torch::kInt64));
  // Location (132, 132) at stride 8 lies in both; the smaller box wins.
  const int64_t idx = 16 * 32 + 16;
  CHECK(locs[idx][0].item<float>() == 132.0f);
  CHECK(n.gt_index[idx].item<int64_t>() == 1);
}

TEST_CASE("postprocess") {
  auto boxes = torch::tensor({{0.0f, 0.0f, 10.0f, 10.0f}, {0.0f, 0.0f, 10.0f, 10.0f}});
  auto scores = torch::tensor({{0.0f, 0.9f}, {0.0f, 0.8f}});
  auto dets = postprocess(scores, boxes, PostprocessOptions{0.05, 0.6, 100});
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.9));
  CHECK(postprocess(torch::full({2, 2}, 0.01f), boxes).empty());

  std::mt19937 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t L = 40;
    auto xy = torch::rand({L, 2}) * 50;
    auto wh = torch::rand({L, 2}) * 30 + 1;
    auto b = torch::cat({xy, xy + wh}, 1);
    auto s = torch::rand({L, 2});
    auto got = postprocess(s, b, PostprocessOptions{0.3, 0.5, 1000});
    std::vector<oracle::Det> all;
    auto bv = oracle::to_vec(b);
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t i = 0; i < L; ++i)
        all.push_back({{bv[4 * i], bv[4 * i + 1], bv[4 * i + 2], bv[4 * i + 3]}, c, s[i][c].item<float>()});
    auto keep = oracle::nms(all, 0.3, 0.5);
    REQUIRE(keep.size() == got.size());
    for (size_t k = 0; k < keep.size(); ++k) {
      CHECK(got[k].class_id == all[keep[k]].cls);
      CHECK(got[k].score == doctest::Approx(all[keep[k]].score));
    }
  }
}

TEST_CASE("detector fingerprint and json round trip") {
  auto spec = DetectorSpec::desk(true, Smoothing::ds_conv_k7);
  nlohmann::json j = spec;
  auto back = j.get<DetectorSpec>();
  CHECK(nlohmann::json(back) == j);
  Detector a(spec), b(spec), c(DetectorSpec::desk(true, Smoothing::standard_k3));
  CHECK(architecture_fingerprint(*a) == architecture_fingerprint(*b));
  CHECK(architecture_fingerprint(*a) != architecture_fingerprint(*c));
  CHECK(parameter_hash(*a) == parameter_hash(*a));
  auto bad = spec;
  bad.head.in_channels = 32;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
