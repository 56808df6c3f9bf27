// Python bindings for the approximation, field arithmetic and quantized
// inference layers, plus the train / compare pipelines.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "fieldnet/approx.hpp"
#include "fieldnet/experiment.hpp"
#include "fieldnet/field.hpp"
#include "fieldnet/fieldnn.hpp"
#include "fieldnet/serialize.hpp"

namespace py = pybind11;
using namespace fieldnet;

namespace {

py::int_ to_py(const fieldnn::BigInt& v) { return py::int_(py::module_::import("builtins").attr("int")(v.str())); }

py::list to_py(const std::vector<fieldnn::BigInt>& v) {
  py::list out;
  for (const auto& x : v) out.append(to_py(x));
  return out;
}

py::dict minimax_dict(const approx::MinimaxResult& r) {
  py::dict d;
  d["coeffs"] = r.poly.coeffs();
  d["error"] = r.error;
  d["ref_points"] = r.ref_points;
  d["iterations"] = r.iterations;
  d["converged"] = r.converged;
  return d;
}

py::dict verdict_dict(const approx::ApproximabilityVerdict& v) {
  py::dict d;
  d["approximable"] = v.approximable;
  d["reason"] = approx::to_string(v.reason);
  d["witness"] = v.witness ? py::cast(*v.witness) : py::none();
  return d;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

class PyQuantizedModel {
 public:
  explicit PyQuantizedModel(fieldnn::QuantizedModel qm, std::optional<std::uint64_t> modulus)
      : qm_(std::move(qm)), modulus_(modulus) {}

  static PyQuantizedModel load(const std::string& path) {
    std::optional<std::uint64_t> m;
    auto qm = fieldnn::quantized_from_json(read_json(path), &m);
    return PyQuantizedModel(std::move(qm), m);
  }

  static PyQuantizedModel from_model(const std::string& model_path, std::int64_t weight_scale,
                                     std::int64_t input_scale, long a, bool fold) {
    fieldnn::QuantConfig qc;
    qc.weight_scale = weight_scale;
    qc.input_scale = input_scale;
    qc.activation_a = a;
    qc.fold_minimax_constant = fold;
    return PyQuantizedModel(fieldnn::quantize(nn::load_model(model_path), qc), std::nullopt);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    out << fieldnn::quantized_to_json(qm_, modulus_).dump(2) << "\n";
  }

  std::vector<std::int64_t> field_forward(const std::vector<std::int64_t>& x, std::optional<std::uint64_t> modulus,
                                          bool allow_wrap) const {
    const std::uint64_t p = modulus ? *modulus : modulus_ ? *modulus_ : fieldnn::auto_prime(qm_);
    return fieldnn::field_forward(qm_, x, field::Modulus(p), allow_wrap);
  }

  py::list integer_forward(const std::vector<std::int64_t>& x) const { return to_py(fieldnn::integer_forward(qm_, x)); }

  std::vector<double> descaled(const std::vector<std::int64_t>& x) const {
    return fieldnn::descale(fieldnn::integer_forward(qm_, x), qm_.output_scale());
  }

  std::vector<std::int64_t> quantize_input(const std::vector<double>& x) const {
    return fieldnn::quantize_input(x, qm_.config().input_scale);
  }

  const fieldnn::QuantizedModel& model() const { return qm_; }
  std::optional<std::uint64_t> modulus() const { return modulus_; }

 private:
  fieldnn::QuantizedModel qm_;
  std::optional<std::uint64_t> modulus_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Polynomial ReLU replacements and exact prime-field inference";

  py::register_exception<fieldnn::FieldIncompatibleError>(m, "FieldIncompatibleError", PyExc_ValueError);
  py::register_exception<fieldnn::ModulusTooSmall>(m, "ModulusTooSmall", PyExc_RuntimeError);
  py::register_exception<nn::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  // approx
  m.def("relu_minimax_deg2", [](double a) { return minimax_dict(approx::relu_minimax_deg2(a)); }, py::arg("a"));
  m.def(
      "remez",
      [](const std::function<double(double)>& f, int degree, double lo, double hi, double tol, int max_iter) {
        approx::RemezOptions o;
        o.tol = tol;
        o.max_iter = max_iter;
        return minimax_dict(approx::remez(f, degree, approx::Interval(lo, hi), o));
      },
      py::arg("f"), py::arg("degree"), py::arg("lo"), py::arg("hi"), py::arg("tol") = 1e-9, py::arg("max_iter") = 100);
  m.def(
      "check_unit_interval",
      [](double fm1, double f0, double f1) { return verdict_dict(approx::check_approx_unit_interval(fm1, f0, f1)); },
      py::arg("f_neg1"), py::arg("f_0"), py::arg("f_1"));
  m.def(
      "check_interval_length",
      [](double lo, double hi, bool is_int_poly) {
        return verdict_dict(approx::check_interval_length(approx::Interval(lo, hi), is_int_poly));
      },
      py::arg("lo"), py::arg("hi"), py::arg("f_is_integer_poly"));
  m.def(
      "check_kernel_special_case",
      [](double alpha, const std::function<double(double)>& f) {
        return verdict_dict(approx::check_kernel_special_case(alpha, f));
      },
      py::arg("alpha"), py::arg("f"));
  m.def("relu", &approx::relu);
  m.def("scaled_relu", &approx::scaled_relu, py::arg("x"), py::arg("c"));

  // field
  m.def("is_prime", &field::is_prime);
  m.def("next_prime", &field::next_prime);
  m.def(
      "encode", [](std::int64_t v, std::uint64_t p) { return field::encode(v, field::Modulus(p)).value(); },
      py::arg("v"), py::arg("p"));
  m.def(
      "decode",
      [](std::uint64_t r, std::uint64_t p) {
        const field::Modulus mod(p);
        return field::decode(field::FieldElement(r, mod), mod);
      },
      py::arg("residue"), py::arg("p"));

  // quantized models
  py::class_<PyQuantizedModel>(m, "QuantizedModel")
      .def_static("load", &PyQuantizedModel::load, py::arg("path"))
      .def_static("from_model", &PyQuantizedModel::from_model, py::arg("model_path"), py::arg("weight_scale") = 256,
                  py::arg("input_scale") = 256, py::arg("a") = 1, py::arg("fold_minimax_constant") = false)
      .def("save", &PyQuantizedModel::save, py::arg("path"))
      .def("field_forward", &PyQuantizedModel::field_forward, py::arg("x"), py::arg("modulus") = py::none(),
           py::arg("allow_wrap") = false)
      .def("integer_forward", &PyQuantizedModel::integer_forward, py::arg("x"))
      .def("descaled", &PyQuantizedModel::descaled, py::arg("x"))
      .def("quantize_input", &PyQuantizedModel::quantize_input, py::arg("x"))
      .def_property_readonly("modulus", &PyQuantizedModel::modulus)
      .def_property_readonly("required_bound", [](const PyQuantizedModel& q) { return to_py(q.model().required_bound()); })
      .def_property_readonly("layer_scales", [](const PyQuantizedModel& q) { return to_py(q.model().layer_scales()); })
      .def_property_readonly("output_scale", [](const PyQuantizedModel& q) { return to_py(q.model().output_scale()); })
      .def_property_readonly("input_shape", [](const PyQuantizedModel& q) { return q.model().input_shape(); })
      .def("auto_prime", [](const PyQuantizedModel& q) { return fieldnn::auto_prime(q.model()); })
      .def("layers", [](const PyQuantizedModel& q) {
        std::vector<std::string> out;
        for (const auto& l : q.model().layers()) out.push_back(fieldnn::describe(l));
        return out;
      });

  // pipelines
  m.def(
      "train",
      [](const std::string& config_json, std::optional<std::string> output_dir) {
        auto cfg = experiment::config_from_json(nlohmann::json::parse(config_json));
        if (output_dir) cfg.output_dir = *output_dir;
        const auto split = experiment::load_dataset(cfg.dataset);
        experiment::TrainResult r;
        {
          py::gil_scoped_release release;
          r = experiment::run_train(cfg, split);
        }
        if (!cfg.output_dir.empty()) experiment::write_train_outputs(cfg, r);
        return nn::metrics_csv(r.history);
      },
      py::arg("config_json"), py::arg("output_dir") = py::none(),
      "Trains per a JSON config string; returns the metrics CSV and writes outputs when an output_dir is set.");
  m.def(
      "compare",
      [](const std::string& config_json, const std::vector<std::string>& schemes,
         const std::vector<std::uint64_t>& seeds) {
        const auto cfg = experiment::config_from_json(nlohmann::json::parse(config_json));
        std::vector<experiment::Scheme> sc;
        for (const auto& s : schemes) sc.push_back(experiment::scheme_from_string(s, cfg.scheme.a));
        const auto split = experiment::load_dataset(cfg.dataset);
        std::vector<experiment::CompareRow> rows;
        {
          py::gil_scoped_release release;
          rows = experiment::run_compare(cfg, sc, seeds, split);
        }
        return experiment::compare_csv(rows);
      },
      py::arg("config_json"), py::arg("schemes") = std::vector<std::string>{"relu", "poly", "quad"},
      py::arg("seeds") = std::vector<std::uint64_t>{0});
}
