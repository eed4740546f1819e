#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "privpool/attention.hpp"
#include "privpool/checks.hpp"
#include "privpool/data.hpp"
#include "privpool/eval.hpp"
#include "privpool/linalg.hpp"
#include "privpool/model.hpp"
#include "privpool/pooling.hpp"

namespace py = pybind11;
using namespace privpool;

namespace {

using RealArray = py::array_t<Real, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const RealArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<Real> values(a.data(), a.data() + a.size());
  return Tensor::from(std::move(shape), std::move(values));
}

RealArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  RealArray out(shape);
  std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(Real));
  return out;
}

Tensor images_tensor(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4 || a.shape(3) != 3) throw std::invalid_argument("images must be uint8 [N,H,W,3]");
  std::vector<Real> values(static_cast<std::size_t>(a.size()));
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<Real>(a.data()[i]) / Real(255);
  return Tensor::from({std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::size_t(a.shape(2)), 3},
                      std::move(values));
}

py::list suite_lines(const checks::SuiteResult& r) {
  py::list out;
  for (const auto& l : r.lines)
    out.append(py::dict(py::arg("name") = l.name, py::arg("value") = l.value, py::arg("threshold") = l.threshold,
                        py::arg("passed") = l.pass, py::arg("informational") = l.informational));
  return out;
}

}  // namespace

PYBIND11_MODULE(_privpool, m) {
  m.doc() = "Privileged pooling core";
  m.attr("float_bits") = static_cast<int>(8 * sizeof(Real));

  m.def("ns_sqrt", [](const RealArray& a, int iterations) { return to_array(linalg::ns_sqrt(to_tensor(a), iterations)); },
        py::arg("a"), py::arg("iterations") = linalg::kDefaultNsIterations);
  m.def("eig_sqrt", [](const RealArray& a) { return to_array(linalg::eig_sqrt_oracle(to_tensor(a))); }, py::arg("a"));
  m.def("sqrt_residual", [](const RealArray& y, const RealArray& a) { return linalg::sqrt_residual(to_tensor(y), to_tensor(a)); });

  m.def("avg_pool", [](const RealArray& f) { return to_array(pooling::avg_pool(to_tensor(f))); });
  m.def("avg_pr_pool", [](const RealArray& f, const RealArray& maps) {
    return to_array(pooling::avg_pr_pool(pooling::expand(to_tensor(f), to_tensor(maps))));
  });
  m.def("covariance", [](const RealArray& x) { return to_array(pooling::covariance(to_tensor(x))); });
  m.def("cov_pool", [](const RealArray& x, int iterations) { return to_array(pooling::cov_pool(to_tensor(x), iterations)); },
        py::arg("x"), py::arg("iterations") = linalg::kDefaultNsIterations);

  m.def("bce_loss", [](const RealArray& a, const RealArray& t) { return attention::bce_loss(to_tensor(a), to_tensor(t)).item(); });
  m.def("multiscale_attention_loss",
        [](const RealArray& a, const RealArray& t, std::vector<std::size_t> scales) {
          return attention::multiscale_attention_loss(to_tensor(a), to_tensor(t), scales).item();
        },
        py::arg("a"), py::arg("target"), py::arg("scales") = std::vector<std::size_t>{1, 3, 7});
  m.def("variance_regularizer", [](const RealArray& a) { return attention::variance_regularizer(to_tensor(a)).item(); });

  m.def("run_suite",
        [](const std::string& name, int ns_iterations) {
          if (name == "grad") return suite_lines(checks::grad_suite());
          if (name == "sqrt") return suite_lines(checks::sqrt_suite(ns_iterations));
          if (name == "pool-identities") return suite_lines(checks::pool_identity_suite());
          throw std::invalid_argument("unknown suite '" + name + "' (grad, sqrt, pool-identities)");
        },
        py::arg("name"), py::arg("ns_iterations") = 15);

  m.def("generate_dataset",
        [](const std::string& out, std::size_t classes, std::size_t per_class, std::size_t val_per_class,
           std::size_t test_per_class, std::size_t image_size, double bias, std::uint64_t seed, double kp_frac) {
          data::GenConfig c;
          c.classes = classes;
          c.per_class = per_class;
          c.val_per_class = val_per_class;
          c.test_per_class = test_per_class;
          c.image_size = image_size;
          c.bias = bias;
          c.seed = seed;
          c.keypoint_fraction = kp_frac;
          c.validate();
          const auto ds = data::generate(c);
          data::write_dataset(ds, out);
          return data::manifest_to_json(ds.manifest);
        },
        py::arg("out"), py::arg("classes") = 8, py::arg("per_class") = 20, py::arg("val_per_class") = 10,
        py::arg("test_per_class") = 25, py::arg("image_size") = 64, py::arg("bias") = 0.9, py::arg("seed") = 0,
        py::arg("kp_frac") = 1.0);

  m.def("rasterize_keypoints",
        [](const std::vector<std::tuple<double, double, bool>>& points, std::size_t image_size, std::size_t feature_size) {
          std::vector<data::Keypoint> kps;
          for (const auto& [x, y, visible] : points) kps.push_back({"", x, y, visible});
          const auto v = data::rasterize_keypoints(kps, image_size, feature_size);
          return to_array(Tensor::from({feature_size, feature_size, kps.size()}, v));
        },
        py::arg("points"), py::arg("image_size"), py::arg("feature_size"));

  py::class_<model::Model>(m, "Model")
      .def_static("load", &model::Model::load, py::arg("checkpoint"))
      .def_property_readonly("config_json", [](const model::Model& self) { return model::config_to_json(self.config()); })
      .def("predict_proba",
           [](const model::Model& self, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& images) {
             return to_array(self.predict_proba(images_tensor(images)));
           },
           py::arg("images"))
      .def("attention_maps",
           [](const model::Model& self, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& images)
               -> py::object {
             const auto out = self.forward(images_tensor(images));
             if (!out.stack) return py::none();
             return to_array(out.stack->maps);
           },
           py::arg("images"));
}
