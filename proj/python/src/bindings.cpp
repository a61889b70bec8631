#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gdnv/checkpoint.hpp"
#include "gdnv/costmodel.hpp"
#include "gdnv/gradcheck.hpp"
#include "gdnv/pipeline.hpp"

namespace py = pybind11;
using namespace gdnv;

namespace {

py::dict report_dict(const CostReport& r) {
  py::dict d;
  d["name"] = r.name;
  d["macs"] = r.macs;
  d["flops"] = r.flops;
  d["params"] = r.params;
  d["pca_params"] = r.pca_params;
  return d;
}

std::vector<float> to_vector(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw ShapeError("descriptor must be one-dimensional");
  return {a.data(), a.data() + a.size()};
}

struct PyModel {
  RunConfig cfg;
  PlaceModel<float> model;

  explicit PyModel(const Container& c) : model(model_from_checkpoint(c, cfg)) {}

  py::array_t<float> describe(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& img) {
    if (img.ndim() != 3 || img.shape(2) != 3) throw ShapeError("image must be H x W x 3 uint8");
    RgbImage rgb;
    rgb.height = static_cast<std::size_t>(img.shape(0));
    rgb.width = static_cast<std::size_t>(img.shape(1));
    rgb.pixels.assign(img.data(), img.data() + img.size());
    std::vector<float> d;
    {
      py::gil_scoped_release release;
      const Tensor<float> x = image_to_tensor(rgb, cfg.input_width, cfg.input_height);
      const std::vector<Tensor<float>> batch{x};
      d = describe_batch(batch);
    }
    py::array_t<float> out(static_cast<py::ssize_t>(d.size()));
    std::copy(d.begin(), d.end(), out.mutable_data());
    return out;
  }

  std::vector<float> describe_batch(const std::vector<Tensor<float>>& batch) {
    return gdnv::describe(model, batch).front();
  }
};

}  // namespace

PYBIND11_MODULE(_gdnv, m) {
  m.doc() = "Ghost-dil-NetVLAD place recognition";

  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def(
      "cost",
      [](const std::string& arch, std::size_t height, std::size_t width, std::size_t clusters,
         const std::string& dilation, double width_multiplier) {
        return report_dict(model_cost(named_arch(arch, height, width, clusters, dilation, width_multiplier)));
      },
      py::arg("arch"), py::arg("height") = 480, py::arg("width") = 640, py::arg("clusters") = 64,
      py::arg("dilation") = "5-2", py::arg("width_multiplier") = 1.0,
      "Analytic MACs, FLOPs and params of a named architecture.");

  m.def(
      "compare",
      [](const std::string& baseline, const std::string& candidate, std::size_t height, std::size_t width,
         std::size_t clusters, const std::string& dilation) {
        const auto c = compare_costs(model_cost(named_arch(baseline, height, width, clusters, dilation)),
                                     model_cost(named_arch(candidate, height, width, clusters, dilation)));
        py::dict d;
        d["flops_reduction_pct"] = c.flops_reduction;
        d["params_reduction_pct"] = c.params_reduction;
        return d;
      },
      py::arg("baseline") = "vgg16-netvlad", py::arg("candidate") = "ghostcnn-netvlad", py::arg("height") = 480,
      py::arg("width") = 640, py::arg("clusters") = 64, py::arg("dilation") = "5-2",
      "Percent FLOPs and params reduction of candidate against baseline.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_gradcheck_suite(seed)) {
          py::dict d;
          d["name"] = r.name;
          d["max_rel_error"] = r.max_rel_error;
          d["checked"] = r.checked;
          d["skipped"] = r.skipped;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 7, "Finite-difference check of every backward pass.");

  py::class_<PyModel>(m, "Model")
      .def_static(
          "load", [](const std::string& path) { return std::make_unique<PyModel>(Container::load(path)); },
          py::arg("path"), "Load a model checkpoint or an index file.")
      .def_property_readonly("input_size",
                             [](const PyModel& p) { return py::make_tuple(p.cfg.input_width, p.cfg.input_height); })
      .def("describe", &PyModel::describe, py::arg("image"), "Unit-norm global descriptor of an H x W x 3 uint8 image.");

  py::class_<DescriptorIndex>(m, "Index")
      .def(py::init<>())
      .def(py::init<std::size_t>(), py::arg("dim"))
      .def_static(
          "load", [](const std::string& path) { return DescriptorIndex::load(Container::load(path)); },
          py::arg("path"))
      .def(
          "add",
          [](DescriptorIndex& idx, std::string id, const py::array_t<float, py::array::c_style | py::array::forcecast>& d) {
            idx.add(std::move(id), to_vector(d));
          },
          py::arg("id"), py::arg("descriptor"))
      .def(
          "query",
          [](const DescriptorIndex& idx, const py::array_t<float, py::array::c_style | py::array::forcecast>& d,
             std::size_t n) {
            py::list out;
            for (const auto& match : idx.query_topn(to_vector(d), n)) out.append(py::make_tuple(match.id, match.distance));
            return out;
          },
          py::arg("descriptor"), py::arg("n") = 5, "(id, distance) pairs, nearest first.")
      .def_property_readonly("ids", &DescriptorIndex::ids)
      .def_property_readonly("dim", &DescriptorIndex::dim)
      .def("__len__", &DescriptorIndex::size);
}
