#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mmfm/baselines.hpp"
#include "mmfm/channelgen.hpp"
#include "mmfm/config.hpp"
#include "mmfm/core.hpp"
#include "mmfm/error.hpp"
#include "mmfm/evalbench.hpp"
#include "mmfm/pipeline.hpp"

namespace py = pybind11;
using namespace mmfm;

namespace {

ChannelMatrix channel_of(const CMatrix& h, const SystemConfig& cfg) {
  ChannelMatrix ch(h);
  ch.validate(cfg);
  return ch;
}

// Stage results cross into Python as JSON text plus file lists; the package
// wrapper decodes the JSON.
py::dict stage_dict(const StageResult& r) {
  py::dict d;
  d["stage"] = r.stage;
  std::vector<std::string> outputs;
  for (const auto& p : r.outputs) outputs.push_back(p.string());
  d["outputs"] = outputs;
  d["manifest"] = r.manifest.string();
  d["metrics_json"] = r.metrics.dump();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the mmfm precoding library";

  auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<PrerequisiteError>(m, "PrerequisiteError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<SingularMatrixError>(m, "SingularMatrixError", PyExc_ArithmeticError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  (void)base;

  py::class_<SystemConfig>(m, "SystemConfig")
      .def(py::init([](int n_tx, int n_users, double p_tx, double p_rf, double noise_power) {
             SystemConfig c{n_tx, n_users, p_tx, p_rf, noise_power};
             c.validate();
             return c;
           }),
           py::arg("n_tx") = 64, py::arg("n_users") = 4, py::arg("p_tx") = 20.0,
           py::arg("p_rf") = 1.0, py::arg("noise_power") = 1e-13)
      .def_readwrite("n_tx", &SystemConfig::n_tx)
      .def_readwrite("n_users", &SystemConfig::n_users)
      .def_readwrite("p_tx", &SystemConfig::p_tx)
      .def_readwrite("p_rf", &SystemConfig::p_rf)
      .def_readwrite("noise_power", &SystemConfig::noise_power)
      .def_property_readonly("max_energy", &SystemConfig::max_energy);

  py::class_<PrecodingSolution>(m, "PrecodingSolution")
      .def(py::init([](CMatrix precoder, RVector mask, double gamma) {
             return PrecodingSolution{std::move(precoder), std::move(mask), gamma};
           }),
           py::arg("precoder"), py::arg("mask"), py::arg("gamma") = 1.0)
      .def_readwrite("precoder", &PrecodingSolution::precoder)
      .def_readwrite("mask", &PrecodingSolution::mask)
      .def_readwrite("gamma", &PrecodingSolution::gamma);

  m.def("zf_precoder",
        [](const CMatrix& h, const SystemConfig& cfg) { return zf_precoder(channel_of(h, cfg), cfg); },
        py::arg("h"), py::arg("cfg"), "Zero-forcing precoder at full power; h is n_users x n_tx.");
  m.def(
      "wmmse_precoder",
      [](const CMatrix& h, const SystemConfig& cfg, int max_iter, double tol) {
        const WmmseReport r = wmmse_precoder(channel_of(h, cfg), cfg, {max_iter, tol});
        return py::make_tuple(r.solution(), r.rate_trace);
      },
      py::arg("h"), py::arg("cfg"), py::arg("max_iter") = 200, py::arg("tol") = 1e-4,
      "WMMSE precoder; returns (solution, sum-rate trace).");
  m.def(
      "user_rates",
      [](const CMatrix& h, const PrecodingSolution& s, const SystemConfig& cfg) {
        return user_rates(channel_of(h, cfg), s, cfg);
      },
      py::arg("h"), py::arg("solution"), py::arg("cfg"));
  m.def(
      "sum_rate",
      [](const CMatrix& h, const PrecodingSolution& s, const SystemConfig& cfg) {
        return sum_rate(channel_of(h, cfg), s, cfg);
      },
      py::arg("h"), py::arg("solution"), py::arg("cfg"));
  m.def("energy", &energy, py::arg("solution"), py::arg("cfg"));

  m.def(
      "flop_count",
      [](const std::string& algorithm, int n_users, int n_tx, int iterations) {
        return flop_count(parse_flop_algorithm(algorithm), n_users, n_tx, iterations);
      },
      py::arg("algorithm"), py::arg("n_users") = 4, py::arg("n_tx") = 64, py::arg("iterations") = 1,
      "Closed-form FLOPs per decision for 'zf', 'wmmse' or 'proposed'.");

  m.def(
      "read_dataset",
      [](const std::filesystem::path& path) {
        const EnvironmentDataset d = read_dataset(path);
        CMatrix out(static_cast<Eigen::Index>(d.size()), d.n_tx);
        for (std::size_t i = 0; i < d.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = d.channels[i].transpose();
        return py::make_tuple(d.spec.env_id, d.spec.los, out);
      },
      py::arg("path"), "Reads a CSIF file; returns (env_id, los, channels[n, n_tx]).");

  py::class_<RunConfig>(m, "RunConfig")
      .def_readonly("seed", &RunConfig::seed)
      .def("hash", &RunConfig::hash)
      .def("to_json", [](const RunConfig& c) { return c.to_json().dump(); })
      .def_property_readonly("system", [](const RunConfig& c) { return c.system; });

  m.def("load_config", &load_config, py::arg("path"), py::arg("overrides") = std::vector<std::string>{},
        py::arg("seed") = std::nullopt);
  m.def("parse_config", &parse_config, py::arg("text"),
        py::arg("overrides") = std::vector<std::string>{}, py::arg("seed") = std::nullopt);

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const RunConfig& cfg, std::optional<std::function<void(const std::string&)>> log) {
             return Pipeline(cfg, log ? Pipeline::Logger(*log) : Pipeline::Logger{});
           }),
           py::arg("config"), py::arg("log") = std::nullopt)
      .def("gen_data", [](Pipeline& p) { return stage_dict(p.gen_data()); })
      .def("pretrain", [](Pipeline& p) { return stage_dict(p.pretrain()); })
      .def("train", [](Pipeline& p) { return stage_dict(p.train()); })
      .def("adapt", [](Pipeline& p) { return stage_dict(p.adapt()); })
      .def("eval", [](Pipeline& p) { return stage_dict(p.eval()); })
      .def("sweep", [](Pipeline& p) { return stage_dict(p.sweep()); })
      .def("flops", [](Pipeline& p, int iterations) { return stage_dict(p.flops(iterations)); },
           py::arg("wmmse_iterations") = 16)
      .def("eval_report_name", &Pipeline::eval_report_name);

  m.def("build_version", &build_version);
}
