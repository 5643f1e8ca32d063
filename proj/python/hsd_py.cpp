#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <torch/torch.h>

#include "hsd/config.hpp"
#include "hsd/core_nn.hpp"
#include "hsd/data_io.hpp"
#include "hsd/errors.hpp"
#include "hsd/fca.hpp"
#include "hsd/head.hpp"
#include "hsd/losses.hpp"
#include "hsd/metrics.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

Array to_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  Array out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * c.numel());
  return out;
}

hsd::HeadSpec head_spec(int64_t bins, double eps_min, double eps_max) {
  hsd::HeadSpec s;
  s.bins = bins;
  s.eps_min = eps_min;
  s.eps_max = eps_max;
  return s;
}

}  // namespace

PYBIND11_MODULE(hsd_fti, m) {
  m.doc() = "Numeric kernels of the hsd library over numpy arrays.";

  py::register_exception<hsd::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<hsd::ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def(
      "conv_params",
      [](int64_t in, int64_t out, int64_t k, bool ds) {
        hsd::ConvSpec s{in, out, k, 1, ds, hsd::Normalization::none, hsd::Activation::none};
        return py::make_tuple(s.closed_form_params(), hsd::count_parameters(*hsd::build_conv(s)).total_params);
      },
      py::arg("in_channels"), py::arg("out_channels"), py::arg("kernel"), py::arg("depthwise_separable") = false,
      "(closed-form, counted) parameter totals of one bias-free, norm-free conv unit.");

  m.def(
      "directional_pool",
      [](const Array& x) {
        auto e = hsd::directional_pool(to_tensor(x));
        return py::make_tuple(to_array(e.z_h), to_array(e.z_w));
      },
      py::arg("x"));

  m.def(
      "expectation",
      [](const Array& logits, double eps_min, double eps_max) {
        auto t = to_tensor(logits);
        return to_array(hsd::distribution_expectation(t, head_spec(t.size(-1) - 1, eps_min, eps_max)));
      },
      py::arg("edge_logits"), py::arg("eps_min"), py::arg("eps_max"));

  m.def(
      "fcl",
      [](const Array& logits, const Array& q, int64_t num_positives) {
        return hsd::fcl(to_tensor(logits), to_tensor(q), num_positives).item<double>();
      },
      py::arg("logits"), py::arg("quality"), py::arg("num_positives"));

  m.def(
      "fdl",
      [](const Array& logits, const Array& target, double eps_min, double eps_max) {
        auto t = to_tensor(logits);
        return hsd::fdl(t, to_tensor(target), head_spec(t.size(-1) - 1, eps_min, eps_max)).item<double>();
      },
      py::arg("edge_logits"), py::arg("target"), py::arg("eps_min"), py::arg("eps_max"));

  m.def(
      "giou", [](const Array& a, const Array& b) { return to_array(hsd::giou(to_tensor(a), to_tensor(b))); },
      py::arg("a"), py::arg("b"));

  m.def(
      "hkd",
      [](const Array& zs, const Array& zt, double tau) {
        return hsd::hkd(to_tensor(zs), to_tensor(zt), tau).item<double>();
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("tau"));

  m.def(
      "detection_rates",
      [](int64_t fault, int64_t normal, int64_t false_alarms, int64_t missed) {
        auto r = hsd::metrics_from_counts(hsd::ConfusionCounts{fault, normal, false_alarms, missed});
        py::dict d;
        d["cdr"] = r.cdr.value();
        d["mdr"] = r.mdr.value();
        d["fdr"] = r.fdr.value();
        return d;
      },
      py::arg("fault"), py::arg("normal"), py::arg("false_alarms"), py::arg("missed"));

  m.def(
      "generate_synthetic",
      [](const std::string& out_dir, int64_t seed, int64_t num_train, int64_t num_test, int64_t size) {
        hsd::SyntheticSpec s;
        s.seed = seed;
        s.num_train = num_train;
        s.num_test = num_test;
        s.image_height = s.image_width = size;
        auto r = hsd::generate_synthetic(s, out_dir);
        py::dict d;
        d["train_fault"] = r.train.fault;
        d["train_normal"] = r.train.normal;
        d["test_fault"] = r.test.fault;
        d["test_normal"] = r.test.normal;
        return d;
      },
      py::arg("out_dir"), py::arg("seed") = 7, py::arg("num_train") = 300, py::arg("num_test") = 100,
      py::arg("size") = 256);

  m.def(
      "preset_toml",
      [](const std::string& preset, const std::vector<std::string>& overrides) {
        return hsd::to_toml(hsd::preset_config(preset, overrides));
      },
      py::arg("preset") = "desk", py::arg("overrides") = std::vector<std::string>{});
}
