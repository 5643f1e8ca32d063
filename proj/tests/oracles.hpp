#pragma once

// Scalar reference implementations. Plain loops over std::vector / raw accessors,
// no tensor ops, so they can check the library kernels independently.

#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace oracle {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double hardswish(double x) { return x * std::min(std::max(x + 3.0, 0.0), 6.0) / 6.0; }

// x: C*H*W row-major. Returns {row means (C*H), column means (C*W)}.
inline std::pair<std::vector<double>, std::vector<double>> directional_pool(const std::vector<double>& x, int64_t C,
                                                                            int64_t H, int64_t W) {
  std::vector<double> zh(C * H, 0.0), zw(C * W, 0.0);
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < H; ++i) {
      double s = 0;
      for (int64_t j = 0; j < W; ++j) s += x[(c * H + i) * W + j];
      zh[c * H + i] = s / static_cast<double>(W);
    }
    for (int64_t j = 0; j < W; ++j) {
      double s = 0;
      for (int64_t i = 0; i < H; ++i) s += x[(c * H + i) * W + j];
      zw[c * W + j] = s / static_cast<double>(H);
    }
  }
  return {zh, zw};
}

inline std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

// Coordinate attention, one image, batch norm in inference form.
struct FcaWeights {
  int64_t C = 0, M = 0;
  std::vector<double> w1, b1;          // M x C, M
  std::vector<double> gamma, beta, mean, var;  // M
  double bn_eps = 1e-5;
  std::vector<double> wh, bh, ww, bw;  // C x M, C
};

inline std::vector<double> fca_forward(const std::vector<double>& x, int64_t H, int64_t W, const FcaWeights& p) {
  const int64_t C = p.C, M = p.M;
  auto [zh, zw] = directional_pool(x, C, H, W);
  const int64_t L = H + W;
  std::vector<double> z(C * L);
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < H; ++i) z[c * L + i] = zh[c * H + i];
    for (int64_t j = 0; j < W; ++j) z[c * L + H + j] = zw[c * W + j];
  }
  std::vector<double> y(M * L);
  for (int64_t m = 0; m < M; ++m) {
    for (int64_t q = 0; q < L; ++q) {
      double s = p.b1[m];
      for (int64_t c = 0; c < C; ++c) s += p.w1[m * C + c] * z[c * L + q];
      s = (s - p.mean[m]) / std::sqrt(p.var[m] + p.bn_eps) * p.gamma[m] + p.beta[m];
      y[m * L + q] = hardswish(s);
    }
  }
  std::vector<double> gh(C * H), gw(C * W);
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < H; ++i) {
      double s = p.bh[c];
      for (int64_t m = 0; m < M; ++m) s += p.wh[c * M + m] * y[m * L + i];
      gh[c * H + i] = sigmoid(s);
    }
    for (int64_t j = 0; j < W; ++j) {
      double s = p.bw[c];
      for (int64_t m = 0; m < M; ++m) s += p.ww[c * M + m] * y[m * L + H + j];
      gw[c * W + j] = sigmoid(s);
    }
  }
  std::vector<double> out(x.size());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j)
        out[(c * H + i) * W + j] = x[(c * H + i) * W + j] * gh[c * H + i] * gw[c * W + j];
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0;
  for (size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (auto& v : p) v /= s;
  return p;
}

inline double expectation(const std::vector<double>& logits, double eps_min, double eps_max) {
  const auto p = softmax(logits);
  const double delta = (eps_max - eps_min) / static_cast<double>(logits.size() - 1);
  double e = 0;
  for (size_t i = 0; i < p.size(); ++i) e += p[i] * (eps_min + delta * static_cast<double>(i));
  return e;
}

// Two-bin cross entropy for one edge.
inline double fdl(const std::vector<double>& logits, double target, double eps_min, double delta) {
  const auto p = softmax(logits);
  const int64_t n = static_cast<int64_t>(logits.size()) - 1;
  int64_t i = static_cast<int64_t>(std::floor((target - eps_min) / delta));
  i = std::clamp<int64_t>(i, 0, n - 1);
  const double ei = eps_min + delta * static_cast<double>(i);
  const double wl = (ei + delta - target) / delta;
  const double wr = (target - ei) / delta;
  return -(wl * std::log(p[i]) + wr * std::log(p[i + 1]));
}

inline double giou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  auto area = [](const std::array<double, 4>& r) {
    return std::max(0.0, r[2] - r[0]) * std::max(0.0, r[3] - r[1]);
  };
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = area(a) + area(b) - inter;
  const double c = (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  return inter / uni - (c - uni) / c;
}

inline double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

// tau^2 * KL(softmax(zt/tau) || softmax(zs/tau)) for one distribution.
inline double kd(const std::vector<double>& zs, const std::vector<double>& zt, double tau) {
  std::vector<double> s(zs.size()), t(zt.size());
  for (size_t i = 0; i < zs.size(); ++i) {
    s[i] = zs[i] / tau;
    t[i] = zt[i] / tau;
  }
  const auto ps = softmax(s);
  const auto pt = softmax(t);
  double kl = 0;
  for (size_t i = 0; i < ps.size(); ++i) kl += pt[i] * (std::log(pt[i]) - std::log(ps[i]));
  return tau * tau * kl;
}

// Full 2x2 confusion table by enumeration over (actual, predicted) cells.
struct Confusion {
  int64_t table[2][2] = {{0, 0}, {0, 0}};  // [actual][predicted]
};

inline Confusion confusion(const std::vector<std::pair<bool, bool>>& decisions) {
  Confusion c;
  for (int a = 0; a < 2; ++a)
    for (int p = 0; p < 2; ++p)
      for (const auto& [pred, actual] : decisions)
        if (static_cast<int>(actual) == a && static_cast<int>(pred) == p) ++c.table[a][p];
  return c;
}

struct Det {
  std::array<double, 4> box;
  int64_t cls;
  double score;
};

// O(n^2) greedy NMS per class; survivors sorted by score desc, ties by input index.
inline std::vector<size_t> nms(const std::vector<Det>& dets, double score_thr, double iou_thr) {
  std::vector<size_t> idx;
  for (size_t i = 0; i < dets.size(); ++i)
    if (dets[i].score >= score_thr) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> removed(dets.size(), false);
  std::vector<size_t> keep;
  for (size_t a = 0; a < idx.size(); ++a) {
    if (removed[idx[a]]) continue;
    keep.push_back(idx[a]);
    for (size_t b = a + 1; b < idx.size(); ++b) {
      if (dets[idx[b]].cls == dets[idx[a]].cls && iou(dets[idx[a]].box, dets[idx[b]].box) > iou_thr) {
        removed[idx[b]] = true;
      }
    }
  }
  return keep;
}

}  // namespace oracle
