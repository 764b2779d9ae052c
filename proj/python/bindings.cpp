#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "incstab/barrier.hpp"
#include "incstab/cli.hpp"
#include "incstab/errors.hpp"
#include "incstab/lipcert.hpp"
#include "incstab/net.hpp"
#include "incstab/net_io.hpp"
#include "incstab/plant.hpp"
#include "incstab/sampling.hpp"
#include "incstab/synth.hpp"

namespace py = pybind11;
using namespace incstab;

PYBIND11_MODULE(_incstab, m) {
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ContractViolation>(m, "ContractViolation", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<IncompleteBudgetError>(m, "IncompleteBudgetError", base.ptr());
  py::register_exception<NotPositiveDefiniteError>(m, "NotPositiveDefiniteError", base.ptr());
  py::register_exception<PlantError>(m, "PlantError", base.ptr());

  py::enum_<Activation>(m, "Activation")
      .value("tanh", Activation::Tanh)
      .value("softplus", Activation::Softplus)
      .value("relu", Activation::ReLU)
      .value("hardtanh", Activation::HardTanh);

  py::class_<FeedforwardNet>(m, "FeedforwardNet")
      .def(py::init<std::vector<Matrix>, std::vector<Vector>, std::vector<Activation>>(),
           py::arg("weights"), py::arg("biases"), py::arg("activations"))
      .def_property_readonly("weights", &FeedforwardNet::weights)
      .def_property_readonly("biases", &FeedforwardNet::biases)
      .def_property_readonly("input_dim", &FeedforwardNet::input_dim)
      .def_property_readonly("output_dim", &FeedforwardNet::output_dim)
      .def("__call__", [](const FeedforwardNet& n, const Vector& x) { return forward(n, x); })
      .def("input_gradient",
           [](const FeedforwardNet& n, const Vector& x) { return input_gradient(n, x); })
      .def("derivative_network", [](const FeedforwardNet& n) { return derivative_network(n); })
      .def("save", [](const FeedforwardNet& n, const std::filesystem::path& p) { save_net(p, n); });
  m.def("load_net", &load_net, py::arg("path"));

  m.def("certify_network_lipschitz",
        [](const FeedforwardNet& n, double bound, const Vector& lambda) {
          return certify_network_lipschitz(n, bound, lambda).certified;
        },
        py::arg("net"), py::arg("bound"), py::arg("multipliers"));

  py::class_<BoxDomain>(m, "BoxDomain")
      .def(py::init<Vector, Vector>(), py::arg("lo"), py::arg("hi"))
      .def_readonly("lo", &BoxDomain::lo)
      .def_readonly("hi", &BoxDomain::hi)
      .def("contains", &BoxDomain::contains, py::arg("x"), py::arg("tol") = 0.0);

  py::class_<SampleCover>(m, "SampleCover")
      .def_readonly("radius", &SampleCover::radius)
      .def_readonly("domain", &SampleCover::domain)
      .def("__len__", &SampleCover::size)
      .def_property_readonly("points", [](const SampleCover& c) {
        Matrix out(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(c.domain.dim()));
        for (std::size_t i = 0; i < c.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = c.points[i];
        return out;
      });
  m.def("build_cover", &build_cover, py::arg("domain"), py::arg("eps"),
        py::arg("budget") = kDefaultCoverBudget);
  m.def("verify_cover",
        [](const SampleCover& c, std::size_t n, std::uint64_t seed) {
          const CoverVerdict v = verify_cover(c, n, seed);
          return py::make_tuple(v.passed, v.worst_distance);
        },
        py::arg("cover"), py::arg("probes"), py::arg("seed") = 0);

  py::class_<BlackBoxSystem>(m, "System")
      .def_readonly("name", &BlackBoxSystem::name)
      .def_readonly("state_domain", &BlackBoxSystem::state_domain)
      .def_readonly("external_domain", &BlackBoxSystem::external_domain)
      .def_readonly("input_domain", &BlackBoxSystem::input_domain)
      .def("__call__", &eval_dynamics, py::arg("x"), py::arg("u"));
  m.def("benchmark", &benchmarks::by_name, py::arg("name"));
  m.def("estimate_plant_lipschitz",
        [](const BlackBoxSystem& sys, std::uint64_t seed) {
          const PlantLipschitz pl = estimate_plant_lipschitz(sys, WeibullFitConfig{}, seed);
          return py::make_tuple(pl.lx, pl.lu);
        },
        py::arg("system"), py::arg("seed") = 0);
  m.def("simulate",
        [](const BlackBoxSystem& sys, const FeedforwardNet& g, const Vector& x0, const Vector& w,
           double dt, double t_end) {
          const SaturationBox box(sys.input_domain.lo, sys.input_domain.hi);
          const Trajectory t = simulate_closed_loop(
              sys, g, box, x0, [w](double) { return w; }, dt, t_end);
          Matrix states(static_cast<Eigen::Index>(t.states.size()), x0.size());
          for (std::size_t i = 0; i < t.states.size(); ++i)
            states.row(static_cast<Eigen::Index>(i)) = t.states[i];
          return py::make_tuple(t.times, states);
        },
        py::arg("system"), py::arg("controller"), py::arg("x0"), py::arg("w"),
        py::arg("dt") = 0.01, py::arg("t_end") = 10.0);

  py::class_<BoxBarrier>(m, "BoxBarrier")
      .def(py::init<BoxDomain, double>(), py::arg("domain"), py::arg("gain") = 1.0)
      .def("__call__", &BoxBarrier::value)
      .def("gradient", &BoxBarrier::gradient);

  py::class_<LipschitzBudget>(m, "LipschitzBudget")
      .def(py::init<>())
      .def_readwrite("lx", &LipschitzBudget::lx)
      .def_readwrite("lu", &LipschitzBudget::lu)
      .def_readwrite("lip_L", &LipschitzBudget::lip_L)
      .def_readwrite("lip_dL", &LipschitzBudget::lip_dL)
      .def_readwrite("lip_C", &LipschitzBudget::lip_C)
      .def_readwrite("sl1", &LipschitzBudget::sl1)
      .def_readwrite("sl2", &LipschitzBudget::sl2)
      .def_readwrite("slu", &LipschitzBudget::slu)
      .def_readwrite("lh", &LipschitzBudget::lh)
      .def_readwrite("ldh", &LipschitzBudget::ldh)
      .def_readwrite("mh", &LipschitzBudget::mh)
      .def_readwrite("ml", &LipschitzBudget::ml)
      .def_readwrite("mf", &LipschitzBudget::mf);
  m.def("compose_overall_L", &compose_overall_L, py::arg("budget"), py::arg("kappa"),
        py::arg("mu_h"));
  m.def("loss_validity", &loss_validity, py::arg("eta"), py::arg("overall_L"), py::arg("eps"));

  m.def("run",
        [](std::vector<std::string> args) {
          args.insert(args.begin(), "incstab");
          std::ostringstream out, err;
          int code = 0;
          {
            py::gil_scoped_release release;
            code = run_command(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
