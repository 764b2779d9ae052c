// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "incstab/cli.hpp"
#include "incstab/lipcert.hpp"
#include "incstab/net.hpp"
#include "incstab/plant.hpp"
#include "incstab/sampling.hpp"
#include "incstab/synth.hpp"
#include "support.hpp"

using namespace incstab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

const fs::path kConfigs = fs::path(INCSTAB_SOURCE_DIR) / "configs";

constexpr double kMarginTol = 1e-5;
constexpr double kInputGradTol = 1e-5;
constexpr double kParamGradTol = 1e-4;
constexpr double kSlopeSlack = 1e-6;
constexpr double kEnvelopeTol = 1e-6;
constexpr double kRk4Ratio = 12.0;
constexpr double kSynthesisSeconds = 30 * 60;

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void criterion_1() {
  const auto t0 = Clock::now();
  struct Case {
    double eta, L, eps, expected;
  };
  const Case cases[] = {{-0.0065, 3.9555, 0.0016, -0.00017},
                        {-0.0806, 7.6689, 0.0105, -0.000076},
                        {-0.0410, 8.103, 0.005, -0.000485},
                        {-0.0182, 1.4542, 0.0125, -0.00002}};
  double worst = 0.0;
  bool verdicts = true;
  for (const Case& c : cases) {
    worst = std::max(worst, std::abs(loss_validity(c.eta, c.L, c.eps) - c.expected));
    Certificate cert;
    cert.eta_star = c.eta;
    cert.overall_L = c.L;
    cert.eps = c.eps;
    for (auto& v : cert.lipschitz) v.certified = true;
    finalize_verdict(cert);
    worst = std::max(worst, std::abs(cert.margin - c.expected));
    verdicts = verdicts && cert.certified;
  }
  const double dt = seconds_since(t0);
  report(1, worst <= kMarginTol && verdicts && dt < 1.0,
         "worst margin error " + fmt(worst) + ", all certified " + (verdicts ? "yes" : "no"));
}

struct SynthesisOutcome {
  bool have = false;
  TrainResult result;
  Problem problem;
  double margin = 0.0;
};

SynthesisOutcome criterion_2() {
  const RunConfig cfg = parse_config(kConfigs / "scalar_desk.ini");
  SynthesisOutcome best;
  bool ok = false;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    HyperParams hp = cfg.hp;
    hp.seed = seed;
    const auto t0 = Clock::now();
    const Problem p = make_problem(cfg.make_system(), hp, *cfg.lx, *cfg.lu, cfg.cover_budget);
    TrainResult r = train(p, cfg.arch, seed);
    const Certificate c = certify(r.v, r.g, r.multipliers, r.eta, p);
    const double dt = seconds_since(t0);
    const bool this_ok = r.converged && c.certified && dt <= kSynthesisSeconds;
    ok = ok || this_ok;
    detail += " seed" + std::to_string(seed) + ":margin=" + fmt(c.margin) + (this_ok ? "(ok)" : "");
    std::cout << "  seed " << seed << ": " << p.xs.size() << " state samples, converged "
              << (r.converged ? "yes" : "no") << ", eta* " << fmt(c.eta_star) << ", L "
              << fmt(c.overall_L) << ", margin " << fmt(c.margin) << ", margin lower bound "
              << fmt(c.margin_lower_bound) << ", " << fmt(dt) << " s" << std::endl;
    if (!best.have || c.margin < best.margin) {
      best = {true, std::move(r), p, c.margin};
    }
  }
  report(2, ok, "scalar plant, 5 seeds," + detail);
  return best;
}

void criterion_3() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  const Activation smooth[] = {Activation::Tanh, Activation::Softplus};
  double worst_input = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto in = static_cast<std::size_t>(1 + i % 4);
    std::vector<std::size_t> hidden{static_cast<std::size_t>(3 + i % 5)};
    if (i % 3 == 0) hidden.push_back(4);
    FeedforwardNet net = testing::dense_net(rng, in, hidden, 1, smooth[i % 2], 0.8);
    const Vector x = testing::random_vector(rng, static_cast<Eigen::Index>(in));
    const Vector fd = testing::central_difference(
        [&](const Vector& z) { return forward(net, z)[0]; }, x, 1e-6);
    worst_input = std::max(worst_input, testing::relative_error(input_gradient(net, x), fd));
  }
  // Parameters through the input gradient: loss = a . dV/dx + b V.
  double worst_param = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto in = static_cast<std::size_t>(2 + i % 3);
    std::vector<std::size_t> hidden{5};
    if (i % 2 == 0) hidden.push_back(3);
    FeedforwardNet net = testing::dense_net(rng, in, hidden, 1, smooth[i % 2], 0.8);
    const Vector x = testing::random_vector(rng, static_cast<Eigen::Index>(in));
    const Vector a = testing::random_vector(rng, static_cast<Eigen::Index>(in));
    const double b = testing::random_vector(rng, 1)[0];
    auto loss = [&] { return a.dot(input_gradient(net, x)) + b * forward(net, x)[0]; };
    NetGradients grads = NetGradients::zeros_like(net);
    pullback(net, forward_cached(net, x), Vector::Constant(1, b), a, grads);
    const auto fd = testing::parameter_fd({&net}, loss, 1e-6);
    worst_param = std::max(worst_param, testing::relative_error(testing::flatten(grads), fd));
  }
  const double dt = seconds_since(t0);
  report(3, worst_input <= kInputGradTol && worst_param <= kParamGradTol && dt < 120.0,
         "input gradient worst " + fmt(worst_input) + " over 1000, parameter gradient worst " +
             fmt(worst_param) + " over 100, " + fmt(dt) + " s");
}

// Smallest certified bound on a coarse ladder below the norm product, with
// a scalar multiplier scan.
std::optional<std::pair<double, LipschitzVerdict>> certify_tight(
    const std::function<LipschitzVerdict(double, const Vector&)>& certify_at, double product,
    Eigen::Index width) {
  for (double frac : {0.3, 0.5, 0.7, 0.85, 1.0, 1.05}) {
    const double L = frac * product;
    for (double lam = 1e-3; lam < 1e3; lam *= 1.3) {
      const LipschitzVerdict v = certify_at(L, Vector::Constant(width, lam));
      if (v.certified) return std::make_pair(L, v);
    }
  }
  return std::nullopt;
}

void criterion_4() {
  std::mt19937_64 rng(77);
  const Activation acts[] = {Activation::Tanh, Activation::Softplus, Activation::ReLU};
  int certified = 0, derivative = 0, violations = 0, attempts = 0;
  double worst_ratio = 0.0;
  while (certified < 50 && attempts < 500) {
    ++attempts;
    const bool grad_case = attempts % 3 == 0;
    const auto in = static_cast<std::size_t>(1 + attempts % 3);
    if (grad_case) {
      const auto width = static_cast<std::size_t>(4 + attempts % 4);
      FeedforwardNet net = testing::dense_net(rng, in, {width}, 1, acts[attempts % 2], 0.7);
      const FeedforwardNet dnet = derivative_network(net);
      double product = 1.0;
      for (const Matrix& w : dnet.weights()) product *= w.operatorNorm();
      product *= 2.0;  // tanh''s Lipschitz constant bound covers both smooth activations
      const auto hit = certify_tight(
          [&](double L, const Vector& lam) { return certify_gradient_lipschitz(net, L, lam); },
          product, static_cast<Eigen::Index>(width));
      if (!hit) continue;
      ++certified;
      ++derivative;
      const double slope = testing::empirical_slope(
          [&](const Vector& x) { return input_gradient(net, x); },
          static_cast<Eigen::Index>(in), 10000, rng);
      worst_ratio = std::max(worst_ratio, slope / hit->first);
      if (slope > hit->first * (1 + kSlopeSlack)) ++violations;
    } else {
      std::vector<std::size_t> hidden{static_cast<std::size_t>(3 + attempts % 5)};
      if (attempts % 2 == 0) hidden.push_back(4);
      const auto out = static_cast<std::size_t>(1 + attempts % 2);
      FeedforwardNet net = testing::dense_net(rng, in, hidden, out, acts[attempts % 3], 0.7);
      double product = 1.0;
      for (const Matrix& w : net.weights()) product *= w.operatorNorm();
      const auto hit = certify_tight(
          [&](double L, const Vector& lam) { return certify_network_lipschitz(net, L, lam); },
          product, static_cast<Eigen::Index>(net.total_hidden()));
      if (!hit) continue;
      ++certified;
      const double slope = testing::empirical_slope(
          [&](const Vector& x) { return forward(net, x); }, static_cast<Eigen::Index>(in), 10000,
          rng);
      worst_ratio = std::max(worst_ratio, slope / hit->first);
      if (slope > hit->first * (1 + kSlopeSlack)) ++violations;
    }
  }
  report(4, certified == 50 && violations == 0,
         std::to_string(certified) + " certified networks (" + std::to_string(derivative) +
             " via derivative networks), " + std::to_string(violations) +
             " violations, worst slope/bound " + fmt(worst_ratio));
}

void criterion_5() {
  bool ok = true;
  std::string detail;
  for (const char* name : {"scalar_nonaffine", "manipulator", "jet_engine", "spacecraft"}) {
    const RunConfig cfg = parse_config(kConfigs / (std::string(name) + ".ini"));
    const BlackBoxSystem sys = cfg.make_system();
    const std::pair<const BoxDomain*, double> sets[] = {{&sys.state_domain, cfg.hp.eps_x},
                                                        {&sys.external_domain, cfg.hp.eps_w}};
    for (const auto& [domain, eps] : sets) {
      const SampleCover cover = build_cover(*domain, eps, cfg.cover_budget);
      const CoverVerdict v = verify_cover(cover, 100000, 5);
      const bool this_ok = v.passed && v.worst_distance <= eps && v.probes == 100000;
      ok = ok && this_ok;
      detail += " " + std::string(name) + ":" + std::to_string(cover.size()) + "pts/" +
                fmt(v.worst_distance / eps);
    }
  }
  report(5, ok, "worst probe distance over eps," + detail);
}

void criterion_6() {
  WeibullFitConfig cfg;
  bool ok = true;
  std::string detail;
  const BoxDomain line(Vector::Constant(1, -1.0), Vector::Constant(1, 1.0));
  for (double c : {0.5, 2.0, 10.0}) {
    const LipschitzEstimate e = estimate_lipschitz_black_box(
        [c](const Vector& x) { return Vector(c * x); }, line, cfg, 11);
    ok = ok && e.value >= c && e.value <= 1.1 * c;
    detail += " c=" + fmt(c) + ":" + fmt(e.value);
  }
  const PlantLipschitz pl = estimate_plant_lipschitz(benchmarks::scalar_nonaffine(0.2), cfg, 12);
  ok = ok && pl.lx >= 0.18 && pl.lx <= 0.25;
  report(6, ok, "estimates" + detail + ", scalar plant L_x " + fmt(pl.lx));
}

void criterion_7(const SynthesisOutcome& s) {
  if (!s.have) {
    report(7, false, "no trained controller");
    return;
  }
  const Problem& p = s.problem;
  const KlEnvelope env = kl_envelope(p.hp);
  std::mt19937_64 rng(7);
  const BoxDomain& X = p.sys.state_domain;
  const BoxDomain& W = p.sys.external_domain;
  double worst_excess = -std::numeric_limits<double>::infinity();
  bool inside = true;
  for (int i = 0; i < 20; ++i) {
    auto draw = [&](const BoxDomain& d) {
      Vector x = d.lo;
      for (Eigen::Index k = 0; k < x.size(); ++k)
        x[k] = std::uniform_real_distribution<double>(d.lo[k], d.hi[k])(rng);
      return x;
    };
    const Vector x0 = draw(X), y0 = draw(X), w = draw(W);
    const ExternalSignal ext = [w](double) { return w; };
    const Trajectory a = simulate_closed_loop(p.sys, s.result.g, p.box, x0, ext, 0.01, 10.0);
    const Trajectory b = simulate_closed_loop(p.sys, s.result.g, p.box, y0, ext, 0.01, 10.0);
    const double s0 = (x0 - y0).norm();
    for (std::size_t k = 0; k < a.times.size(); ++k) {
      const double gap = (a.states[k] - b.states[k]).norm();
      worst_excess = std::max(worst_excess, gap - env.beta(s0, a.times[k]));
      inside = inside && X.contains(a.states[k], 1e-12) && X.contains(b.states[k], 1e-12);
    }
  }
  report(7, worst_excess <= kEnvelopeTol && inside,
         "controller with margin " + fmt(s.margin) + ", worst excess over beta " +
             fmt(worst_excess) + ", invariance " + (inside ? "held" : "violated"));
}

void criterion_8() {
  BlackBoxSystem sys = benchmarks::linear_toy();
  const FeedbackLaw zero = [](const Vector&, double) { return Vector::Zero(1); };
  std::vector<double> errors;
  for (double dt : {1e-2, 5e-3, 2.5e-3}) {
    const Trajectory t = integrate_rk4(sys, zero, Vector::Constant(1, 1.0), dt, 1.0);
    errors.push_back(std::abs(t.states.back()[0] - std::exp(-1.0)));
  }
  const double r1 = errors[0] / errors[1];
  const double r2 = errors[1] / errors[2];
  report(8, r1 >= kRk4Ratio && r2 >= kRk4Ratio,
         "error ratios " + fmt(r1) + ", " + fmt(r2));
}

void criterion_9() {
  const fs::path base = fs::temp_directory_path() / "incstab_acceptance_determinism";
  fs::remove_all(base);
  std::string history[2];
  double margin[2];
  int codes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = base / std::to_string(i);
    std::ostringstream out, err;
    codes[i] = run_command({"incstab", "train", "--config", (kConfigs / "scalar_desk.ini").string(),
                            "--out", dir.string(), "--seed", "3", "--epochs", "15"},
                           out, err);
    history[i] = slurp(dir / "history.csv");
    margin[i] = nlohmann::json::parse(slurp(dir / "certificate.json")).at("margin").get<double>();
  }
  const bool ok = codes[0] != kExitError && codes[0] == codes[1] && !history[0].empty() &&
                  history[0] == history[1] && margin[0] == margin[1];
  report(9, ok, std::string("history.csv ") + (history[0] == history[1] ? "identical" : "differs") +
                    ", margins " + fmt(margin[0]) + " / " + fmt(margin[1]));
  fs::remove_all(base);
}

}  // namespace

int main() {
  auto guarded = [](int id, const std::function<void()>& f) {
    try {
      f();
    } catch (const std::exception& e) {
      report(id, false, std::string("exception: ") + e.what());
    }
  };
  SynthesisOutcome synthesis;
  guarded(1, criterion_1);
  guarded(2, [&] { synthesis = criterion_2(); });
  guarded(3, criterion_3);
  guarded(4, criterion_4);
  guarded(5, criterion_5);
  guarded(6, criterion_6);
  guarded(7, [&] { criterion_7(synthesis); });
  guarded(8, criterion_8);
  guarded(9, criterion_9);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
