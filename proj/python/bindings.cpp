#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cli.hpp"
#include "mmfuse/app.hpp"
#include "mmfuse/error.hpp"

namespace py = pybind11;
using namespace mmfuse;
using nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Shape shape_of(const py::buffer_info& info) {
  Shape s;
  for (auto d : info.shape) s.push_back(static_cast<std::size_t>(d));
  return s;
}

Tensor<float> to_tensor(const FloatArray& a) {
  const auto info = a.request();
  const auto* p = static_cast<const float*>(info.ptr);
  return Tensor<float>::from(shape_of(info), std::vector<float>(p, p + info.size));
}

py::array_t<float> to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

// Python dicts cross the boundary as JSON text.
json from_py(const py::object& obj) {
  if (obj.is_none()) return json::object();
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

// Dataset as numpy arrays: volumes [N x C x H x W x D], ehr [N x C_M].
py::dict dataset_dict(const Dataset& data) {
  py::dict d;
  py::list ids;
  std::vector<std::size_t> labels;
  if (data.empty()) throw ValueError("empty dataset");
  const auto& s0 = data.front().volume.shape();
  std::vector<py::ssize_t> vshape{static_cast<py::ssize_t>(data.size())};
  vshape.insert(vshape.end(), s0.begin(), s0.end());
  py::array_t<float> volumes(vshape);
  py::array_t<float> ehr({static_cast<py::ssize_t>(data.size()),
                          static_cast<py::ssize_t>(data.front().ehr.size())});
  float* vp = volumes.mutable_data();
  float* ep = ehr.mutable_data();
  for (const auto& s : data) {
    ids.append(s.id);
    labels.push_back(s.label);
    vp = std::copy(s.volume.values().begin(), s.volume.values().end(), vp);
    ep = std::copy(s.ehr.begin(), s.ehr.end(), ep);
  }
  d["ids"] = ids;
  d["labels"] = py::array_t<std::size_t>(labels.size(), labels.data());
  d["volumes"] = volumes;
  d["ehr"] = ehr;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mmfuse, m) {
  m.doc() = "Image + EHR fusion models with a small autodiff core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ValueError>(m, "ValueError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("c_int_rule", &c_int_rule, py::arg("image_channels"), py::arg("ehr_dim"));
  m.def("preset_names", &preset_names);
  m.def("preset", [](const std::string& name) { return to_py(run_config_to_json(preset(name))); },
        py::arg("name") = "desk");
  m.def("resolve_config", [](const py::object& cfg) {
    auto c = run_config_from_json(from_py(cfg));
    c.validate();
    return to_py(run_config_to_json(c));
  }, py::arg("config"), "Fill in preset defaults and validate.");

  m.def("auc", [](const std::vector<double>& scores, const std::vector<std::size_t>& labels) {
    return auc(scores, labels);
  });
  m.def("overall_accuracy", &overall_accuracy, py::arg("preds"), py::arg("labels"));
  m.def("stratified_kfold",
        [](const std::vector<std::size_t>& labels, std::size_t k, std::uint64_t seed) {
          py::list out;
          for (const auto& f : stratified_kfold(labels, k, seed)) out.append(py::make_tuple(f.train, f.val));
          return out;
        },
        py::arg("labels"), py::arg("k"), py::arg("seed") = 0);

  py::class_<LrSchedule>(m, "LrSchedule")
      .def(py::init<double, std::size_t, std::size_t, double>(), py::arg("base_lr"), py::arg("patience"),
           py::arg("warmup_epochs") = 5, py::arg("factor") = 0.2)
      .def("lr", &LrSchedule::lr, py::arg("epoch"))
      .def("observe", &LrSchedule::observe, py::arg("epoch"), py::arg("metric"));

  m.def("generate_synthetic", [](const py::object& spec) {
    return dataset_dict(generate_synthetic(spec_from_json(from_py(spec))));
  }, py::arg("spec") = py::none(), "Synthetic samples; `spec` overrides the default data spec.");
  m.def("load_samples", [](const py::object& cfg) {
    return dataset_dict(load_samples(run_config_from_json(from_py(cfg))));
  }, py::arg("config"), "Samples of a run config with standardized volumes and raw EHR.");
  m.def("standardize_volume", [](const FloatArray& v) { return to_array(standardize_volume(to_tensor(v))); });

  m.def("encode_volume", [](const FloatArray& v) { return py::bytes(encode_volume(to_tensor(v))); });
  m.def("decode_volume", [](const py::bytes& b) { return to_array(decode_volume(std::string(b))); });
  m.def("write_volume", [](const std::string& path, const FloatArray& v) { write_volume(path, to_tensor(v)); });
  m.def("read_volume", [](const std::string& path) { return to_array(read_volume(path)); });
  m.def("overlay_ppm",
        [](const FloatArray& slice, const FloatArray& q) {
          const auto si = slice.request();
          if (si.ndim != 2) throw ShapeError("overlay: slice must be 2-d (H x W)");
          const auto s = to_tensor(slice), a = to_tensor(q);
          return py::bytes(encode_overlay_ppm(s.values(), a.values(), s.dim(0), s.dim(1)));
        },
        py::arg("slice"), py::arg("q"));

  py::class_<Model<float>>(m, "Model")
      .def(py::init([](const py::object& cfg) { return Model<float>(model_config_from_json(from_py(cfg))); }),
           py::arg("config") = py::none(), "Model from a model-config dict; missing keys take defaults.")
      .def_static("load", [](const std::string& dir) { return load_checkpoint(dir); }, py::arg("path"))
      .def("save", [](const Model<float>& model, const std::string& dir) { save_checkpoint(dir, model); },
           py::arg("path"))
      .def_property_readonly("config", [](const Model<float>& model) { return to_py(model_config_to_json(model.config())); })
      .def("eval", [](Model<float>& model) { model.set_mode(Mode::eval); })
      .def("train", [](Model<float>& model) { model.set_mode(Mode::train); })
      .def("forward",
           [](Model<float>& model, const FloatArray& image, const FloatArray& ehr) {
             NoGradGuard guard;
             auto out = model.forward_batch(to_tensor(image), to_tensor(ehr));
             py::list maps;
             for (const auto& q : out.attention) maps.append(to_array(q));
             return py::make_tuple(to_array(out.logits), maps);
           },
           py::arg("image"), py::arg("ehr"), "Batched forward pass without recording a graph.")
      .def("attention",
           [](Model<float>& model, const FloatArray& image, const FloatArray& ehr) {
             py::list maps;
             for (const auto& q : extract_attention(model, to_tensor(image), to_tensor(ehr)))
               maps.append(to_array(q));
             return maps;
           },
           py::arg("image"), py::arg("ehr"), "Attention maps of one sample at input resolution.")
      .def("state_dict", [](const Model<float>& model) {
        py::dict d;
        for (const auto& e : model.state()) d[py::str(e.name)] = to_array(e.tensor);
        return d;
      });

  m.def("cli",
        [](const std::vector<std::string>& args) {
          std::vector<std::string> all{"mmfuse"};
          all.insert(all.end(), args.begin(), args.end());
          std::vector<const char*> argv;
          for (const auto& a : all) argv.push_back(a.c_str());
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Run the command line; returns (exit_code, stdout, stderr).");
}
