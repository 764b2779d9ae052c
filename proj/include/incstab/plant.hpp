#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "incstab/lipcert.hpp"
#include "incstab/net.hpp"
#include "incstab/sampling.hpp"

namespace incstab {

using Dynamics = std::function<Vector(const Vector& x, const Vector& u)>;

/// Query-only plant. Training code sees nothing but `eval`.
struct BlackBoxSystem {
  std::string name;
  std::size_t state_dim = 0;
  std::size_t input_dim = 0;
  Dynamics eval;
  BoxDomain state_domain;     // X
  BoxDomain external_domain;  // W
  BoxDomain input_domain;     // U
  bool concurrent_safe = true;
};

Vector eval_dynamics(const BlackBoxSystem& sys, const Vector& x, const Vector& u);

struct PlantJacobians {
  Matrix dx;
  Matrix du;
};

/// Central differences; step <= 0 selects 1e-4 * (1 + |x|_inf).
PlantJacobians jacobians_fd(const BlackBoxSystem& sys, const Vector& x, const Vector& u,
                            double step = 0.0);

struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> states;
  std::vector<Vector> inputs_external;
  std::vector<Vector> inputs_internal;
};

using FeedbackLaw = std::function<Vector(const Vector& x, double t)>;
using ExternalSignal = std::function<Vector(double t)>;

/// Fixed-step classical RK4 with the input held over each step. The
/// external signal is only recorded; a closed loop folds it into `control`.
Trajectory integrate_rk4(const BlackBoxSystem& sys, const FeedbackLaw& control, const Vector& x0,
                         double dt, double t_end, const ExternalSignal& external = nullptr);

/// Closed loop x' = f(x, sat(g(x, w(t)))).
Trajectory simulate_closed_loop(const BlackBoxSystem& sys, const FeedforwardNet& controller,
                                const SaturationBox& box, const Vector& x0,
                                const ExternalSignal& external, double dt, double t_end);

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj);

using ControllerMap = std::function<Vector(const Vector& x, const Vector& w)>;

/// max over cover pairs of |f(x_s, g(x_s, w_p))| plus lip_margin * eps with
/// eps the larger cover radius.
double estimate_dynamics_bound(const BlackBoxSystem& sys, const SampleCover& xs,
                               const ControllerMap& controller, const SampleCover& ws,
                               double lip_margin);

struct PlantLipschitz {
  double lx = 0.0;
  double lu = 0.0;
  std::vector<LipschitzEstimate> state_estimates;  // one per input anchor
  std::vector<LipschitzEstimate> input_estimates;  // one per state anchor
};

/// State constant: max over fixed-input anchors; input constant: max over
/// fixed-state anchors. The first anchor is always the box center.
PlantLipschitz estimate_plant_lipschitz(const BlackBoxSystem& sys, const WeibullFitConfig& cfg,
                                        std::uint64_t seed, std::size_t anchors = 3);

namespace benchmarks {

/// x' = a (sin x + tan u).
BlackBoxSystem scalar_nonaffine(double a = 0.2);
/// x1' = x2, x2' = (u - b x2) / M.
BlackBoxSystem manipulator(double mass = 1.0, double damping = 0.1);
/// Moore-Greitzer model in no-stall mode.
BlackBoxSystem jet_engine(double c2 = 1.5, double c3 = 0.5);
/// Euler rigid-body rotation with three torques.
BlackBoxSystem spacecraft(double j1 = 200.0, double j2 = 200.0, double j3 = 100.0);
/// x' = -x + u.
BlackBoxSystem linear_toy();

BlackBoxSystem by_name(const std::string& name);

}  // namespace benchmarks

/// Plant served by an external process speaking "EVAL x.. u.." / "OK dx..".
BlackBoxSystem subprocess_system(const std::string& command, std::size_t state_dim,
                                 std::size_t input_dim, BoxDomain state_domain,
                                 BoxDomain external_domain, BoxDomain input_domain);

}  // namespace incstab
