#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "layercache/engine.hpp"
#include "layercache/errors.hpp"
#include "layercache/graph.hpp"
#include "layercache/medial.hpp"
#include "layercache/pipeline.hpp"

namespace py = pybind11;
using namespace layercache;

namespace {

using farray = py::array_t<float, py::array::c_style | py::array::forcecast>;

tensor to_tensor(const farray& a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  tensor t(shape);
  std::copy(a.data(), a.data() + t.size(), t.data());
  return t;
}

py::array_t<float> to_array(const tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

py::dict record_dict(const exit_record& r) {
  py::dict d;
  d["sample_id"] = r.sample_id;
  d["early"] = r.early;
  if (r.early) d["exit_ordinal"] = r.exit_ordinal;
  d["predicted"] = r.predicted;
  d["confidence"] = r.confidence;
  d["path_flops"] = r.path_flops;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cache-enabled inference for feed-forward classifiers";

  py::register_exception<precondition_error>(m, "PreconditionError");
  py::register_exception<parse_error>(m, "ParseError");

  py::class_<backbone_graph>(m, "Backbone")
      .def_static("load", &backbone_graph::load, py::arg("manifest"))
      .def("forward", [](const backbone_graph& g, const farray& x) {
        return to_array(g.forward(to_tensor(x)));
      })
      .def("total_flops", &backbone_graph::total_flops)
      .def("num_classes", &backbone_graph::num_classes)
      .def("content_hash", &backbone_graph::content_hash)
      .def("candidates", [](const backbone_graph& g, std::size_t skip_last_k) {
        py::list out;
        for (const auto& c : g.identify_candidates(skip_last_k)) {
          py::dict d;
          d["layer"] = c.node;
          d["ordinal"] = c.ordinal;
          d["tap_shape"] = c.tap_shape;
          d["cumulative_flops"] = c.cumulative_flops;
          d["fallback_flops"] = c.fallback_flops;
          out.append(d);
        }
        return out;
      }, py::arg("skip_last_k") = 1);

  py::class_<cache_enabled_model>(m, "Model")
      .def("infer", [](const cache_enabled_model& mdl, const farray& x,
                       const std::vector<std::string>& ids) {
        py::list out;
        for (const auto& r : mdl.infer_batch(to_tensor(x), ids)) out.append(record_dict(r));
        return out;
      }, py::arg("inputs"), py::arg("ids"))
      .def("final_path_flops", &cache_enabled_model::final_path_flops)
      .def("num_caches",
           [](const cache_enabled_model& mdl) { return mdl.caches().size(); })
      .def("tolerance", &cache_enabled_model::tolerance);

  m.def("load_model", [](const std::filesystem::path& config) {
    return load_enabled_model(pipeline_config::load(config));
  }, py::arg("config"));

  m.def("write_stream", [](const std::filesystem::path& path, const farray& values,
                           const std::vector<std::string>& ids,
                           const std::vector<std::int32_t>& labels) {
    sample_set s;
    s.inputs = to_tensor(values);
    s.ids = ids;
    s.labels = labels;
    s.save(path);
  }, py::arg("path"), py::arg("values"), py::arg("ids"),
     py::arg("labels") = std::vector<std::int32_t>{});

  m.def("read_stream", [](const std::filesystem::path& path) {
    const sample_set s = sample_set::load(path);
    return py::make_tuple(s.ids, to_array(s.inputs), s.labels);
  }, py::arg("path"));

  // pipeline stages; each takes the config json path
  m.def("run_candidates",
        [](const std::filesystem::path& c) { run_candidates(pipeline_config::load(c)); });
  m.def("run_collect",
        [](const std::filesystem::path& c) { run_collect(pipeline_config::load(c)); });
  m.def("run_search",
        [](const std::filesystem::path& c) { run_search(pipeline_config::load(c)); });
  m.def("run_train_caches",
        [](const std::filesystem::path& c) { run_train_caches(pipeline_config::load(c)); });
  m.def("run_calibrate",
        [](const std::filesystem::path& c) { run_calibrate(pipeline_config::load(c)); });
  m.def("run_optimize",
        [](const std::filesystem::path& c) { run_optimize(pipeline_config::load(c)); });
  m.def("run_evaluate", [](const std::filesystem::path& c) {
    const auto rep = run_evaluate(pipeline_config::load(c));
    return py::module_::import("json").attr("loads")(rep.to_json().dump());
  });
  m.def("run_report",
        [](const std::filesystem::path& c) { return run_report(pipeline_config::load(c)); });
}
