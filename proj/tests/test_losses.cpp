#include <doctest.h>

#include <torch/torch.h>

#include <cmath>
#include <random>

#include "hsd/errors.hpp"
#include "hsd/losses.hpp"
#include "oracles.hpp"

using namespace hsd;

namespace {

HeadSpec unit_bins(int64_t n) {
  HeadSpec s;
  s.bins = n;
  s.eps_min = 0;
  s.eps_max = static_cast<double>(n);
  return s;
}

torch::Tensor logit(double p) { return torch::tensor({std::log(p / (1 - p))}, torch::kFloat64); }

}  // namespace

TEST_CASE("fcl") {
  auto q = torch::rand({30}, torch::kFloat64).clamp(0.05, 0.95);
  CHECK(fcl(torch::log(q / (1 - q)), q, 3).item<double>() == doctest::Approx(0.0).epsilon(1e-12));

  CHECK(fcl(logit(0.5), torch::ones({1}, torch::kFloat64), 1).item<double>() ==
        doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-9));
  CHECK(fcl(logit(0.5), torch::ones({1}, torch::kFloat64), 1).item<double>() == doctest::Approx(0.1733).epsilon(1e-3));

  for (int t = 0; t < 1000; ++t) {
    auto s = torch::randn({6}, torch::kFloat64) * 4;
    CHECK(fcl(s, torch::rand({6}, torch::kFloat64), 2).item<double>() >= 0.0);
  }
  CHECK_THROWS_AS(fcl(torch::zeros({2}), torch::tensor({0.5f, 1.5f}), 1), ValidationError);
  CHECK_THROWS_AS(fcl(torch::zeros({2}), torch::zeros({3}), 1), ShapeError);
}

TEST_CASE("fdl") {
  auto spec = unit_bins(4);
  auto onehot = torch::full({1, 4, 5}, -1e3, torch::kFloat64);
  onehot.select(2, 2).fill_(0);
  CHECK(fdl(onehot, torch::full({1, 4}, 2.0, torch::kFloat64), spec).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));

  auto two = torch::full({1, 4, 5}, -1e3, torch::kFloat64);
  two.select(2, 2).fill_(std::log(0.7));
  two.select(2, 3).fill_(std::log(0.3));
  const double at_target = fdl(two, torch::full({1, 4}, 2.3, torch::kFloat64), spec).item<double>();
  CHECK(at_target == doctest::Approx(0.6109).epsilon(1e-4));

  // Grid over distributions on bins 2, 3: the closed form is the minimum.
  for (int k = 1; k < 100; ++k) {
    const double p = k / 100.0;
    auto g = torch::full({1, 4, 5}, -1e3, torch::kFloat64);
    g.select(2, 2).fill_(std::log(p));
    g.select(2, 3).fill_(std::log(1 - p));
    CHECK(fdl(g, torch::full({1, 4}, 2.3, torch::kFloat64), spec).item<double>() >= at_target - 1e-12);
  }

  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  for (int t = 0; t < 20; ++t) {
    auto z = torch::randn({3, 4, 5}, torch::kFloat64);
    auto tgt = torch::empty({3, 4}, torch::kFloat64);
    for (int64_t i = 0; i < 12; ++i) tgt.view(-1)[i] = u(rng);
    double ref = 0;
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t e = 0; e < 4; ++e) ref += oracle::fdl(oracle::to_vec(z[i][e]), tgt[i][e].item<double>(), 0, 1);
    CHECK(fdl(z, tgt, spec).item<double>() == doctest::Approx(ref / 12).epsilon(1e-9));
  }

  int64_t clamped = 0;
  fdl(torch::zeros({1, 4, 5}), torch::tensor({-1.0f, 2.0f, 5.0f, 1.0f}).view({1, 4}), spec, &clamped);
  CHECK(clamped == 2);
  CHECK_THROWS_AS(fdl(torch::zeros({1, 4, 6}), torch::zeros({1, 4}), spec), ShapeError);
}

TEST_CASE("giou") {
  auto a = torch::tensor({0.0, 0.0, 2.0, 2.0}, torch::kFloat64).view({1, 4});
  auto b = torch::tensor({1.0, 1.0, 3.0, 3.0}, torch::kFloat64).view({1, 4});
  CHECK(giou(a, a).item<double>() == doctest::Approx(1.0));
  CHECK(frl_giou(a, a).item<double>() == doctest::Approx(0.0));
  CHECK(giou(a, b).item<double>() == doctest::Approx(1.0 / 7 - 2.0 / 9).epsilon(1e-12));
  CHECK(frl_giou(a, b).item<double>() == doctest::Approx(1.0794).epsilon(1e-4));

  auto far = torch::tensor({1000.0, 1000.0, 1001.0, 1001.0}, torch::kFloat64).view({1, 4});
  auto unit = torch::tensor({0.0, 0.0, 1.0, 1.0}, torch::kFloat64).view({1, 4});
  CHECK(std::abs(frl_giou(unit, far).item<double>() - 2.0) < 1e-2);

  auto inner = torch::tensor({0.5, 0.5, 1.5, 1.5}, torch::kFloat64).view({1, 4});
  const double contained = giou(a, inner).item<double>();
  CHECK(contained == doctest::Approx(oracle::iou({0, 0, 2, 2}, {0.5, 0.5, 1.5, 1.5})));

  auto degenerate = torch::tensor({1.0, 1.0, 1.0, 1.0}, torch::kFloat64).view({1, 4});
  CHECK(std::isfinite(giou(degenerate, a).item<double>()));

  // Quality weighting.
  auto pair = torch::cat({a, a});
  auto tgt = torch::cat({a, b});
  auto w = torch::tensor({1.0, 3.0}, torch::kFloat64);
  const double expect = (0.0 + 3 * (1 - (1.0 / 7 - 2.0 / 9))) / 4;
  CHECK(frl_giou(pair, tgt, w).item<double>() == doctest::Approx(expect).epsilon(1e-9));
  CHECK(frl_giou(pair.flip(0), tgt.flip(0), w.flip(0)).item<double>() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("hkd") {
  auto z = torch::randn({5, 4, 17}, torch::kFloat64);
  CHECK(std::abs(hkd(z, z.clone(), 15).item<double>()) <= 1e-9);
  auto zs = torch::tensor({1.0, 0.0}, torch::kFloat64).view({1, 2});
  auto zt = torch::tensor({0.0, 1.0}, torch::kFloat64).view({1, 2});
  CHECK(hkd(zs, zt, 1.0).item<double>() == doctest::Approx(0.4622).epsilon(1e-4));

  auto s = torch::randn({6, 4, 9}, torch::kFloat64);
  auto t = torch::randn({6, 4, 9}, torch::kFloat64);
  const double base = hkd(s, t, 5).item<double>();
  CHECK(std::abs(hkd(s + 3.25, t + 3.25, 5).item<double>() - base) <= 1e-9);
  CHECK(base > 0);

  double ref = 0;
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t e = 0; e < 4; ++e) ref += oracle::kd(oracle::to_vec(s[i][e]), oracle::to_vec(t[i][e]), 5);
  CHECK(base == doctest::Approx(ref / 6).epsilon(1e-9));

  auto mask = torch::tensor({true, false, true, false, false, false});
  double masked = 0;
  for (int64_t i : {0, 2})
    for (int64_t e = 0; e < 4; ++e) masked += oracle::kd(oracle::to_vec(s[i][e]), oracle::to_vec(t[i][e]), 5);
  CHECK(hkd(s, t, 5, mask).item<double>() == doctest::Approx(masked / 2).epsilon(1e-9));

  auto perm = torch::randperm(6);
  CHECK(hkd(s.index_select(0, perm), t.index_select(0, perm), 5).item<double>() == doctest::Approx(base).epsilon(1e-12));

  auto sg = s.clone().requires_grad_(true);
  auto tg = t.clone().requires_grad_(true);
  hkd(sg, tg, 5).backward();
  CHECK(!tg.grad().defined());

  CHECK_THROWS_AS(hkd(s, t, 0.0), ValidationError);
  CHECK_THROWS_AS(hkd(s, t.narrow(2, 0, 8), 1.0), ShapeError);
}

TEST_CASE("total loss") {
  LossWeights w;
  auto b = total_loss(1, 2, 3, 4, w);
  CHECK(b.total == doctest::Approx(11.5));
  w.hkd_weight = 0;
  CHECK(total_loss(1, 2, 3, 4, w).total == doctest::Approx(7.5));
  CHECK(total_loss(1, 2, 3, 1e6, w).total == doctest::Approx(7.5));

  LossTerms terms{torch::tensor(1.0), torch::tensor(std::nan("")), torch::tensor(0.5), {}};
  try {
    total_loss(terms, LossWeights{});
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.component() == "fdl");
  }
  LossTerms partial{torch::tensor(1.0), {}, {}, {}};
  CHECK(total_loss(partial, LossWeights{}).bundle.total == doctest::Approx(1.0));

  LossWeights bad;
  bad.tau = -1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("loss log format") {
  CHECK(std::string(LossLog::kHeader) == "iteration,fcl,fdl,frl,hkd,total");
  LossBundle b{1, 2, 3, 4, 11.5};
  auto row = LossLog::format_row(7, b);
  CHECK(row.rfind("7,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 5);
}
