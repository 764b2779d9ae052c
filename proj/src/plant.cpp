#include "incstab/plant.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "incstab/errors.hpp"
#include "incstab/net_io.hpp"

namespace incstab {

Vector eval_dynamics(const BlackBoxSystem& sys, const Vector& x, const Vector& u) {
  if (static_cast<std::size_t>(x.size()) != sys.state_dim ||
      static_cast<std::size_t>(u.size()) != sys.input_dim) {
    throw ContractViolation(sys.name + ": expected x of length " + std::to_string(sys.state_dim) +
                            " and u of length " + std::to_string(sys.input_dim));
  }
  if (!sys.eval) {
    throw ContractViolation(sys.name + ": plant has no oracle");
  }
  Vector dx = sys.eval(x, u);
  if (static_cast<std::size_t>(dx.size()) != sys.state_dim) {
    throw PlantError(sys.name + ": oracle returned " + std::to_string(dx.size()) + " values");
  }
  return dx;
}

PlantJacobians jacobians_fd(const BlackBoxSystem& sys, const Vector& x, const Vector& u,
                            double step) {
  if (step <= 0.0) {
    step = 1e-4 * (1.0 + x.lpNorm<Eigen::Infinity>());
  }
  const auto n = static_cast<Eigen::Index>(sys.state_dim);
  const auto m = static_cast<Eigen::Index>(sys.input_dim);
  PlantJacobians j{Matrix(n, n), Matrix(n, m)};
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector xp = x;
    Vector xm = x;
    xp[i] += step;
    xm[i] -= step;
    j.dx.col(i) = (eval_dynamics(sys, xp, u) - eval_dynamics(sys, xm, u)) / (2.0 * step);
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    Vector up = u;
    Vector um = u;
    up[i] += step;
    um[i] -= step;
    j.du.col(i) = (eval_dynamics(sys, x, up) - eval_dynamics(sys, x, um)) / (2.0 * step);
  }
  return j;
}

Trajectory integrate_rk4(const BlackBoxSystem& sys, const FeedbackLaw& control, const Vector& x0,
                         double dt, double t_end, const ExternalSignal& external) {
  if (!(dt > 0.0) || !(t_end >= dt)) {
    throw ContractViolation("integrate_rk4 needs dt > 0 and t_end >= dt");
  }
  if (static_cast<std::size_t>(x0.size()) != sys.state_dim) {
    throw ContractViolation("initial state has the wrong length");
  }
  const auto steps = static_cast<std::size_t>(std::llround(t_end / dt));
  Trajectory traj;
  traj.times.reserve(steps + 1);
  traj.states.reserve(steps + 1);
  Vector x = x0;
  auto record = [&](double t, const Vector& u) {
    traj.times.push_back(t);
    traj.states.push_back(x);
    traj.inputs_internal.push_back(u);
    traj.inputs_external.push_back(external ? external(t) : Vector());
  };
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * dt;
    const Vector u = control ? control(x, t) : Vector::Zero(static_cast<Eigen::Index>(sys.input_dim));
    record(t, u);
    if (k == steps) {
      break;
    }
    const Vector k1 = eval_dynamics(sys, x, u);
    const Vector k2 = eval_dynamics(sys, x + 0.5 * dt * k1, u);
    const Vector k3 = eval_dynamics(sys, x + 0.5 * dt * k2, u);
    const Vector k4 = eval_dynamics(sys, x + dt * k3, u);
    const Vector next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) {
      throw DivergenceError(x, t);
    }
    x = next;
  }
  return traj;
}

Trajectory simulate_closed_loop(const BlackBoxSystem& sys, const FeedforwardNet& controller,
                                const SaturationBox& box, const Vector& x0,
                                const ExternalSignal& external, double dt, double t_end) {
  if (!external) {
    throw ContractViolation("closed-loop simulation needs an external input signal");
  }
  auto law = [&](const Vector& x, double t) {
    return saturated_output(controller, x, external(t), box);
  };
  return integrate_rk4(sys, law, x0, dt, t_end, external);
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream os(path);
  if (!os) {
    throw ConfigError("cannot write " + path.string());
  }
  const auto n = traj.states.empty() ? 0 : traj.states.front().size();
  const auto m = traj.inputs_internal.empty() ? 0 : traj.inputs_internal.front().size();
  const auto p = traj.inputs_external.empty() ? 0 : traj.inputs_external.front().size();
  os << "t";
  for (Eigen::Index i = 0; i < n; ++i) os << ",x" << (i + 1);
  for (Eigen::Index i = 0; i < m; ++i) os << ",u" << (i + 1);
  for (Eigen::Index i = 0; i < p; ++i) os << ",w" << (i + 1);
  os << '\n';
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    os << format_double(traj.times[k]);
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << format_double(traj.states[k][i]);
    for (Eigen::Index i = 0; i < m; ++i) os << ',' << format_double(traj.inputs_internal[k][i]);
    for (Eigen::Index i = 0; i < p; ++i) os << ',' << format_double(traj.inputs_external[k][i]);
    os << '\n';
  }
}

double estimate_dynamics_bound(const BlackBoxSystem& sys, const SampleCover& xs,
                               const ControllerMap& controller, const SampleCover& ws,
                               double lip_margin) {
  double best = 0.0;
  for (const auto& x : xs.points) {
    for (const auto& w : ws.points) {
      const Vector u = controller ? controller(x, w)
                                  : Vector::Zero(static_cast<Eigen::Index>(sys.input_dim));
      best = std::max(best, eval_dynamics(sys, x, u).norm());
    }
  }
  return best + lip_margin * std::max(xs.radius, ws.radius);
}

PlantLipschitz estimate_plant_lipschitz(const BlackBoxSystem& sys, const WeibullFitConfig& cfg,
                                        std::uint64_t seed, std::size_t anchors) {
  anchors = std::max<std::size_t>(anchors, 1);
  std::mt19937_64 rng(seed);
  auto draw = [&](const BoxDomain& box, std::size_t k) {
    if (k == 0) {
      return box.center();
    }
    Vector v(static_cast<Eigen::Index>(box.dim()));
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      std::uniform_real_distribution<double> d(box.lo[i], box.hi[i]);
      v[i] = d(rng);
    }
    return v;
  };
  PlantLipschitz out;
  for (std::size_t k = 0; k < anchors; ++k) {
    const Vector u = draw(sys.input_domain, k);
    auto oracle = [&](const Vector& x) { return eval_dynamics(sys, x, u); };
    out.state_estimates.push_back(
        estimate_lipschitz_black_box(oracle, sys.state_domain, cfg, seed + 2 * k + 1));
    out.lx = std::max(out.lx, out.state_estimates.back().value);
  }
  for (std::size_t k = 0; k < anchors; ++k) {
    const Vector x = draw(sys.state_domain, k);
    auto oracle = [&](const Vector& u) { return eval_dynamics(sys, x, u); };
    out.input_estimates.push_back(
        estimate_lipschitz_black_box(oracle, sys.input_domain, cfg, seed + 2 * k + 2));
    out.lu = std::max(out.lu, out.input_estimates.back().value);
  }
  return out;
}

namespace benchmarks {

namespace {

Vector filled(Eigen::Index n, double v) { return Vector::Constant(n, v); }

}  // namespace

BlackBoxSystem scalar_nonaffine(double a) {
  BlackBoxSystem sys;
  sys.name = "scalar_nonaffine";
  sys.state_dim = 1;
  sys.input_dim = 1;
  sys.eval = [a](const Vector& x, const Vector& u) {
    return Vector::Constant(1, a * (std::sin(x[0]) + std::tan(u[0])));
  };
  sys.state_domain = BoxDomain(filled(1, -std::numbers::pi / 2), filled(1, std::numbers::pi / 2));
  sys.external_domain = BoxDomain(filled(1, -0.5), filled(1, 0.5));
  sys.input_domain = BoxDomain(filled(1, -1.0), filled(1, 1.0));
  return sys;
}

BlackBoxSystem manipulator(double mass, double damping) {
  BlackBoxSystem sys;
  sys.name = "manipulator";
  sys.state_dim = 2;
  sys.input_dim = 1;
  sys.eval = [mass, damping](const Vector& x, const Vector& u) {
    Vector dx(2);
    dx << x[1], (u[0] - damping * x[1]) / mass;
    return dx;
  };
  sys.state_domain = BoxDomain(filled(2, -std::numbers::pi / 6), filled(2, std::numbers::pi / 6));
  sys.external_domain = BoxDomain(filled(1, -0.5), filled(1, 0.5));
  sys.input_domain = BoxDomain(filled(1, -5.0), filled(1, 5.0));
  return sys;
}

BlackBoxSystem jet_engine(double c2, double c3) {
  BlackBoxSystem sys;
  sys.name = "jet_engine";
  sys.state_dim = 2;
  sys.input_dim = 1;
  sys.eval = [c2, c3](const Vector& x, const Vector& u) {
    Vector dx(2);
    dx << -x[1] - c2 * x[0] * x[0] - c3 * x[0] * x[0] * x[0], u[0];
    return dx;
  };
  sys.state_domain = BoxDomain(filled(2, -0.25), filled(2, 0.25));
  sys.external_domain = BoxDomain(filled(1, -0.25), filled(1, 0.25));
  sys.input_domain = BoxDomain(filled(1, -2.0), filled(1, 2.0));
  return sys;
}

BlackBoxSystem spacecraft(double j1, double j2, double j3) {
  BlackBoxSystem sys;
  sys.name = "spacecraft";
  sys.state_dim = 3;
  sys.input_dim = 3;
  sys.eval = [j1, j2, j3](const Vector& x, const Vector& u) {
    Vector dx(3);
    dx << (j2 - j3) / j1 * x[1] * x[2] + u[0] / j1,
          (j3 - j1) / j2 * x[0] * x[2] + u[1] / j2,
          (j1 - j2) / j3 * x[0] * x[1] + u[2] / j3;
    return dx;
  };
  sys.state_domain = BoxDomain(filled(3, -0.25), filled(3, 0.25));
  sys.external_domain = BoxDomain(filled(1, -10.0), filled(1, 10.0));
  sys.input_domain = BoxDomain(filled(3, -20.0), filled(3, 20.0));
  return sys;
}

BlackBoxSystem linear_toy() {
  BlackBoxSystem sys;
  sys.name = "linear_toy";
  sys.state_dim = 1;
  sys.input_dim = 1;
  sys.eval = [](const Vector& x, const Vector& u) { return Vector::Constant(1, -x[0] + u[0]); };
  sys.state_domain = BoxDomain(filled(1, -1.0), filled(1, 1.0));
  sys.external_domain = BoxDomain(filled(1, -0.1), filled(1, 0.1));
  sys.input_domain = BoxDomain(filled(1, -1.0), filled(1, 1.0));
  return sys;
}

BlackBoxSystem by_name(const std::string& name) {
  if (name == "scalar_nonaffine") return scalar_nonaffine();
  if (name == "manipulator") return manipulator();
  if (name == "jet_engine") return jet_engine();
  if (name == "spacecraft") return spacecraft();
  if (name == "linear_toy") return linear_toy();
  throw ConfigError("unknown builtin plant '" + name + "'");
}

}  // namespace benchmarks

namespace {

class PlantProcess {
 public:
  explicit PlantProcess(const std::string& command) {
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) {
      throw PlantError("pipe() failed: " + std::string(std::strerror(errno)));
    }
    std::signal(SIGPIPE, SIG_IGN);
    pid_ = fork();
    if (pid_ < 0) {
      throw PlantError("fork() failed: " + std::string(std::strerror(errno)));
    }
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    out_ = fdopen(to_child[1], "w");
    in_ = fdopen(from_child[0], "r");
    if (out_ == nullptr || in_ == nullptr) {
      throw PlantError("fdopen() failed for plant pipes");
    }
  }

  ~PlantProcess() {
    if (out_ != nullptr) std::fclose(out_);
    if (in_ != nullptr) std::fclose(in_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  PlantProcess(const PlantProcess&) = delete;
  PlantProcess& operator=(const PlantProcess&) = delete;

  Vector query(const Vector& x, const Vector& u, std::size_t n) {
    std::lock_guard<std::mutex> lock(mu_);
    std::string req = "EVAL";
    for (Eigen::Index i = 0; i < x.size(); ++i) req += ' ' + format_double(x[i]);
    for (Eigen::Index i = 0; i < u.size(); ++i) req += ' ' + format_double(u[i]);
    req += '\n';
    if (std::fputs(req.c_str(), out_) < 0 || std::fflush(out_) != 0) {
      throw PlantError("plant process closed its input");
    }
    std::string line;
    for (int c = std::fgetc(in_); c != EOF && c != '\n'; c = std::fgetc(in_)) {
      line.push_back(static_cast<char>(c));
    }
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag != "OK") {
      throw PlantError("plant process replied '" + line + "'");
    }
    Vector dx(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      std::string tok;
      if (!(is >> tok)) {
        throw PlantError("plant reply has too few values: '" + line + "'");
      }
      dx[static_cast<Eigen::Index>(i)] = parse_double(tok);
    }
    return dx;
  }

 private:
  pid_t pid_ = -1;
  FILE* out_ = nullptr;
  FILE* in_ = nullptr;
  std::mutex mu_;
};

}  // namespace

BlackBoxSystem subprocess_system(const std::string& command, std::size_t state_dim,
                                 std::size_t input_dim, BoxDomain state_domain,
                                 BoxDomain external_domain, BoxDomain input_domain) {
  auto proc = std::make_shared<PlantProcess>(command);
  BlackBoxSystem sys;
  sys.name = "subprocess";
  sys.state_dim = state_dim;
  sys.input_dim = input_dim;
  sys.eval = [proc, state_dim](const Vector& x, const Vector& u) {
    return proc->query(x, u, state_dim);
  };
  sys.state_domain = std::move(state_domain);
  sys.external_domain = std::move(external_domain);
  sys.input_domain = std::move(input_domain);
  sys.concurrent_safe = false;
  return sys;
}

}  // namespace incstab
