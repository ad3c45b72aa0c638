#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>

#include "ditto/error.hpp"
#include "ditto/hwsim.hpp"
#include "ditto/metrics.hpp"
#include "ditto/quantized.hpp"
#include "ditto/refmodel.hpp"
#include "ditto/report_io.hpp"

namespace py = pybind11;
using namespace ditto;

namespace {

Trace generate(const std::string& model, int steps, std::uint64_t seed, double bound, int collapse) {
  const auto kind = model_kind_from_string(model);
  if (!kind) throw Error(ErrorCode::InvalidArgument, "unknown model '" + model + "'");
  const ModelSpec spec = *kind == ModelKind::ToyUnet ? ModelSpec::toy_unet() : ModelSpec::toy_dit();
  SamplerConfig cfg = SamplerConfig::make(steps, seed);
  cfg.similarity_bound = bound;
  cfg.collapse_step = collapse;
  return run_sampler(build_model(spec), cfg);
}

HwConfig hardware(const std::string& preset, std::uint64_t lane_divisor) {
  const auto p = preset_from_string(preset);
  if (!p) throw Error(ErrorCode::InvalidArgument, "unknown preset '" + preset + "'");
  return preset_config(*p, lane_divisor);
}

// JSON crosses the boundary as text; the package wrapper parses it.
std::string simulate(const Trace& t, const std::string& variant, const std::string& preset,
                     std::uint64_t lane_divisor) {
  const auto v = variant_from_string(variant);
  if (!v) throw Error(ErrorCode::InvalidArgument, "unknown variant '" + variant + "'");
  const QuantizedTrace qt(t);
  const Workload w(qt);
  const RunReport r = run_sim(w, *v, hardware(preset, lane_divisor));
  return r.summary(w.graph()).dump();
}

std::string compare(const Trace& t, std::uint64_t lane_divisor) {
  const QuantizedTrace qt(t);
  return compare_presets(Workload(qt), lane_divisor).to_json().dump();
}

std::string analyze(const Trace& t, const std::string& model) {
  return analyze_trace(QuantizedTrace(t), model).summary().dump();
}

std::string verify(const Trace& t) { return verify_exactness(QuantizedTrace(t)).to_json().dump(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Temporal-difference accelerator simulator";

  static py::exception<Error> err(m, "DittoError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(err, (std::string(to_string(e.code())) + ": " + e.what()).c_str());
    }
  });

  py::class_<Trace>(m, "Trace")
      .def_property_readonly("steps", &Trace::step_count)
      .def_property_readonly("node_count", [](const Trace& t) { return t.graph.size(); })
      .def("node_names",
           [](const Trace& t) {
             std::vector<std::string> out;
             for (const auto& n : t.graph.nodes()) out.push_back(n.name);
             return out;
           })
      .def("output", [](const Trace& t, int step, NodeId node) { return t.output(step, node).values; },
           py::arg("step"), py::arg("node"))
      .def("sha256", [](const Trace& t) { return sha256_hex(serialize_trace(t)); })
      .def("save", [](const Trace& t, const std::string& path) { export_trace(t, path); })
      .def_static("load", [](const std::string& path) { return import_trace(path); })
      .def("__eq__", [](const Trace& a, const Trace& b) { return a == b; });

  m.def("generate_trace", &generate, py::arg("model") = "toy-unet", py::arg("steps") = 20,
        py::arg("seed") = 3, py::arg("similarity_bound") = 0.05, py::arg("collapse_step") = 0);
  m.def("_simulate", &simulate, py::arg("trace"), py::arg("variant") = "ditto",
        py::arg("preset") = "ditto", py::arg("lane_divisor") = 64);
  m.def("_compare", &compare, py::arg("trace"), py::arg("lane_divisor") = 64);
  m.def("_analyze", &analyze, py::arg("trace"), py::arg("model") = "trace");
  m.def("_verify", &verify, py::arg("trace"));
  m.def("cosine", [](const std::vector<float>& a, const std::vector<float>& b) { return cosine(a, b); });
  m.def("variants", [] {
    std::vector<std::string> out;
    for (auto v : {Variant::Direct, Variant::AllTemporal, Variant::AllTemporalNoBypass, Variant::AllSpatial,
                   Variant::Ditto, Variant::DittoPlus, Variant::DynamicDitto, Variant::Ideal,
                   Variant::IdealPlus, Variant::CambriconD})
      out.emplace_back(to_string(v));
    return out;
  });
}
