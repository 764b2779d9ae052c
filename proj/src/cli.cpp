#include "incstab/cli.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "incstab/errors.hpp"
#include "incstab/hash.hpp"
#include "incstab/net_io.hpp"

namespace incstab {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Line of `key` inside `[section]`, for error messages. 0 when not found.
std::size_t line_of(const std::string& text, const std::string& section, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  std::string current;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      current = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos && current == section && trim(t.substr(0, eq)) == key) {
      return n;
    }
  }
  return 0;
}

Vector parse_vector(const std::string& text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<double> values;
  for (std::string tok; is >> tok;) {
    values.push_back(parse_double(tok));
  }
  if (values.empty()) {
    throw ConfigError("expected at least one number");
  }
  return Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::vector<Vector> parse_cases(const std::string& text) {
  std::vector<Vector> out;
  std::istringstream is(text);
  for (std::string item; std::getline(is, item, ';');) {
    out.push_back(parse_vector(item));
  }
  return out;
}

std::size_t parse_count(const std::string& text) {
  std::size_t pos = 0;
  const unsigned long long v = std::stoull(text, &pos);
  if (pos != text.size() || text.front() == '-') {
    throw ConfigError("expected a nonnegative integer");
  }
  return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_widths(const std::string& text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<std::size_t> out;
  for (std::string tok; is >> tok;) {
    out.push_back(parse_count(tok));
  }
  return out;
}

template <std::size_t N>
std::array<double, N> parse_array(const std::string& text) {
  const Vector v = parse_vector(text);
  if (v.size() != static_cast<Eigen::Index>(N)) {
    throw ConfigError("expected " + std::to_string(N) + " numbers");
  }
  std::array<double, N> out{};
  std::copy(v.data(), v.data() + N, out.begin());
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

// Bounds of a box are set key by key and assembled once both are known.
struct PendingBoxes {
  std::map<std::string, Vector> lo;
  std::map<std::string, Vector> hi;
};

std::map<std::string, Setter> make_setters(const fs::path& base, PendingBoxes& boxes) {
  auto hp = [](double HyperParams::*field) {
    return [field](RunConfig& c, const std::string& v) { c.hp.*field = parse_double(v); };
  };
  auto hp_count = [](std::size_t HyperParams::*field) {
    return [field](RunConfig& c, const std::string& v) { c.hp.*field = parse_count(v); };
  };
  auto file = [base](std::optional<fs::path> RunConfig::*field) {
    return [field, base](RunConfig& c, const std::string& v) {
      fs::path p = v;
      if (p.is_relative()) p = base / p;
      if (!fs::exists(p)) {
        throw ConfigError("file does not exist: " + p.string());
      }
      c.*field = p;
    };
  };
  auto box_lo = [&boxes](const std::string& name) {
    return [&boxes, name](RunConfig&, const std::string& v) { boxes.lo[name] = parse_vector(v); };
  };
  auto box_hi = [&boxes](const std::string& name) {
    return [&boxes, name](RunConfig&, const std::string& v) { boxes.hi[name] = parse_vector(v); };
  };

  std::map<std::string, Setter> s;
  s["plant.builtin"] = [](RunConfig& c, const std::string& v) { c.plant.builtin = v; };
  s["plant.command"] = [](RunConfig& c, const std::string& v) { c.plant.command = v; };
  s["plant.state_dim"] = [](RunConfig& c, const std::string& v) {
    c.plant.state_dim = parse_count(v);
  };
  s["plant.input_dim"] = [](RunConfig& c, const std::string& v) {
    c.plant.input_dim = parse_count(v);
  };
  for (const char* b : {"state", "external", "input"}) {
    s[std::string("plant.") + b + "_lo"] = box_lo(b);
    s[std::string("plant.") + b + "_hi"] = box_hi(b);
  }

  s["hyper.k1"] = hp(&HyperParams::k1);
  s["hyper.k2"] = hp(&HyperParams::k2);
  s["hyper.kw"] = hp(&HyperParams::kw);
  s["hyper.gamma1"] = hp(&HyperParams::gamma1);
  s["hyper.gamma2"] = hp(&HyperParams::gamma2);
  s["hyper.gammaw"] = hp(&HyperParams::gammaw);
  s["hyper.kappa"] = hp(&HyperParams::kappa);
  s["hyper.mu_h"] = hp(&HyperParams::mu_h);
  s["hyper.c"] = [](RunConfig& c, const std::string& v) { c.hp.c = parse_array<4>(v); };
  s["hyper.cl"] = [](RunConfig& c, const std::string& v) { c.hp.cl = parse_array<3>(v); };
  s["hyper.cv"] = hp(&HyperParams::cv);
  s["hyper.lip_L"] = hp(&HyperParams::lip_L);
  s["hyper.lip_dL"] = hp(&HyperParams::lip_dL);
  s["hyper.lip_C"] = hp(&HyperParams::lip_C);
  s["hyper.eps_x"] = hp(&HyperParams::eps_x);
  s["hyper.eps_w"] = hp(&HyperParams::eps_w);
  s["hyper.d_min"] = hp(&HyperParams::d_min);
  s["hyper.epochs"] = hp_count(&HyperParams::epochs);
  s["hyper.batch_size"] = hp_count(&HyperParams::batch_size);
  s["hyper.n_batches"] = hp_count(&HyperParams::n_batches);
  s["hyper.lr_net"] = hp(&HyperParams::lr_net);
  s["hyper.lr_scalar"] = hp(&HyperParams::lr_scalar);
  s["hyper.init_scale"] = hp(&HyperParams::init_scale);
  s["hyper.barrier_gain"] = hp(&HyperParams::barrier_gain);
  s["hyper.seed"] = [](RunConfig& c, const std::string& v) { c.hp.seed = parse_count(v); };

  s["architecture.clf_hidden"] = [](RunConfig& c, const std::string& v) {
    c.arch.clf_hidden = parse_widths(v);
  };
  s["architecture.clf_activation"] = [](RunConfig& c, const std::string& v) {
    c.arch.clf_activation = activation_from_string(v);
  };
  s["architecture.ctrl_hidden"] = [](RunConfig& c, const std::string& v) {
    c.arch.ctrl_hidden = parse_widths(v);
  };
  s["architecture.ctrl_activation"] = [](RunConfig& c, const std::string& v) {
    c.arch.ctrl_activation = activation_from_string(v);
  };

  s["lipschitz.lx"] = [](RunConfig& c, const std::string& v) { c.lx = parse_double(v); };
  s["lipschitz.lu"] = [](RunConfig& c, const std::string& v) { c.lu = parse_double(v); };
  s["lipschitz.n_batches"] = [](RunConfig& c, const std::string& v) {
    c.weibull.n_batches = parse_count(v);
  };
  s["lipschitz.pairs_per_batch"] = [](RunConfig& c, const std::string& v) {
    c.weibull.pairs_per_batch = parse_count(v);
  };
  s["lipschitz.pair_radius"] = [](RunConfig& c, const std::string& v) {
    c.weibull.pair_radius = parse_double(v);
  };
  s["lipschitz.fit_grid"] = [](RunConfig& c, const std::string& v) {
    c.weibull.fit_grid = parse_count(v);
  };
  s["lipschitz.anchors"] = [](RunConfig& c, const std::string& v) {
    c.lipschitz_anchors = parse_count(v);
  };

  s["run.cover_budget"] = [](RunConfig& c, const std::string& v) {
    c.cover_budget = parse_count(v);
  };
  s["run.probes"] = [](RunConfig& c, const std::string& v) { c.probes = parse_count(v); };

  s["reference.clf"] = file(&RunConfig::clf_weights);
  s["reference.controller"] = file(&RunConfig::controller_weights);
  s["reference.multipliers"] = file(&RunConfig::multipliers);

  s["simulate.dt"] = [](RunConfig& c, const std::string& v) { c.sim.dt = parse_double(v); };
  s["simulate.t_end"] = [](RunConfig& c, const std::string& v) { c.sim.t_end = parse_double(v); };
  s["simulate.x0"] = [](RunConfig& c, const std::string& v) { c.sim.x0 = parse_cases(v); };
  s["simulate.w"] = [](RunConfig& c, const std::string& v) { c.sim.w = parse_cases(v); };

  s["kl.s_max"] = [](RunConfig& c, const std::string& v) { c.kl.s_max = parse_double(v); };
  s["kl.t_max"] = [](RunConfig& c, const std::string& v) { c.kl.t_max = parse_double(v); };
  s["kl.r_max"] = [](RunConfig& c, const std::string& v) { c.kl.r_max = parse_double(v); };
  s["kl.points"] = [](RunConfig& c, const std::string& v) { c.kl.points = parse_count(v); };
  return s;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const fs::path& origin) {
  const std::string where = origin.empty() ? std::string("<config>") : origin.string();
  boost::property_tree::ptree tree;
  try {
    std::istringstream is(text);
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(where + ":" + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig cfg;
  cfg.source = origin;
  cfg.text = text;
  PendingBoxes boxes;
  const auto setters = make_setters(origin.empty() ? fs::current_path() : origin.parent_path(),
                                    boxes);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(where + ":" + std::to_string(line_of(text, "", section)) + ": key '" +
                        section + "' outside any section");
    }
    for (const auto& [key, node] : body) {
      const std::string full = section + "." + key;
      const std::size_t line = line_of(text, section, key);
      const auto it = setters.find(full);
      if (it == setters.end()) {
        throw ConfigError(where + ":" + std::to_string(line) + ": unknown key '" + full + "'");
      }
      try {
        it->second(cfg, trim(node.data()));
      } catch (const std::exception& e) {
        throw ConfigError(where + ":" + std::to_string(line) + ": bad value for '" + full +
                          "': " + e.what());
      }
    }
  }

  for (const char* name : {"state", "external", "input"}) {
    const bool has_lo = boxes.lo.count(name) != 0;
    const bool has_hi = boxes.hi.count(name) != 0;
    if (has_lo != has_hi) {
      throw ConfigError(where + ": [plant] needs both " + name + "_lo and " + name + "_hi");
    }
    if (!has_lo) continue;
    BoxDomain box;
    try {
      box = BoxDomain(boxes.lo[name], boxes.hi[name]);
    } catch (const std::exception& e) {
      throw ConfigError(where + ": [plant] " + name + " box: " + e.what());
    }
    if (std::string(name) == "state") cfg.plant.state_domain = box;
    if (std::string(name) == "external") cfg.plant.external_domain = box;
    if (std::string(name) == "input") cfg.plant.input_domain = box;
  }

  if (cfg.plant.builtin.empty() == cfg.plant.command.empty()) {
    throw ConfigError(where + ": [plant] needs exactly one of 'builtin' or 'command'");
  }
  if (!cfg.plant.command.empty()) {
    if (cfg.plant.state_dim == 0 || cfg.plant.input_dim == 0 || !cfg.plant.state_domain ||
        !cfg.plant.external_domain || !cfg.plant.input_domain) {
      throw ConfigError(where +
                        ": a subprocess plant needs state_dim, input_dim and all three boxes");
    }
  }
  if (cfg.sim.w.size() > 1 && cfg.sim.w.size() != cfg.sim.x0.size()) {
    throw ConfigError(where + ": [simulate] w must list one case or one per x0");
  }
  try {
    cfg.hp.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  // Fail early on unknown builtins and inconsistent boxes.
  if (!cfg.plant.builtin.empty()) {
    try {
      (void)cfg.make_system();
    } catch (const std::exception& e) {
      throw ConfigError(where + ": [plant] " + e.what());
    }
  }
  return cfg;
}

RunConfig parse_config(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ConfigError("cannot open config file " + path.string());
  }
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path);
}

BlackBoxSystem RunConfig::make_system() const {
  BlackBoxSystem sys;
  if (!plant.builtin.empty()) {
    sys = benchmarks::by_name(plant.builtin);
    auto replace = [](BoxDomain& target, const std::optional<BoxDomain>& b, const char* name) {
      if (!b) return;
      if (b->dim() != target.dim()) {
        throw ConfigError(std::string(name) + " box has the wrong dimension");
      }
      target = *b;
    };
    replace(sys.state_domain, plant.state_domain, "state");
    replace(sys.external_domain, plant.external_domain, "external");
    replace(sys.input_domain, plant.input_domain, "input");
    return sys;
  }
  return subprocess_system(plant.command, plant.state_dim, plant.input_dim, *plant.state_domain,
                           *plant.external_domain, *plant.input_domain);
}

namespace {

struct Options {
  fs::path config;
  std::optional<std::uint64_t> seed;
  fs::path out = "out";
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> probe;
};

struct Session {
  RunConfig cfg;
  Options opt;
  std::ostream& out;

  std::uint64_t seed() const { return cfg.hp.seed; }

  std::string config_hash() const {
    std::string text = cfg.text;
    if (opt.seed) text += "\n[override]\nseed = " + std::to_string(*opt.seed) + "\n";
    if (opt.epochs) text += "\n[override]\nepochs = " + std::to_string(*opt.epochs) + "\n";
    return sha256_hex(text);
  }

  fs::path artifact(const std::string& name) const { return opt.out / name; }

  fs::path existing(const std::optional<fs::path>& reference, const std::string& name) const {
    const fs::path p = reference ? *reference : artifact(name);
    if (!fs::exists(p)) {
      throw ConfigError("missing artifact: " + p.string());
    }
    return p;
  }
};

void write_lipschitz_file(const fs::path& path, const PlantLipschitz& pl) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << "lx = " << format_double(pl.lx) << '\n';
  os << "lu = " << format_double(pl.lu) << '\n';
  for (std::size_t i = 0; i < pl.state_estimates.size(); ++i) {
    const auto& e = pl.state_estimates[i];
    os << "state_anchor_" << i << " = " << format_double(e.value) << " raw "
       << format_double(e.raw_max) << (e.fallback ? " fallback" : "") << '\n';
  }
  for (std::size_t i = 0; i < pl.input_estimates.size(); ++i) {
    const auto& e = pl.input_estimates[i];
    os << "input_anchor_" << i << " = " << format_double(e.value) << " raw "
       << format_double(e.raw_max) << (e.fallback ? " fallback" : "") << '\n';
  }
}

std::pair<double, double> read_lipschitz_file(const fs::path& path) {
  std::ifstream is(path);
  std::optional<double> lx;
  std::optional<double> lu;
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string val = trim(std::string_view(line).substr(eq + 1));
    if (key == "lx") lx = parse_double(val);
    if (key == "lu") lu = parse_double(val);
  }
  if (!lx || !lu) {
    throw ConfigError(path.string() + ": needs 'lx' and 'lu'");
  }
  return {*lx, *lu};
}

PlantLipschitz estimate(const Session& s, const BlackBoxSystem& sys) {
  return estimate_plant_lipschitz(sys, s.cfg.weibull, s.seed(), s.cfg.lipschitz_anchors);
}

// Config values win, then a previous estimate-lipschitz run, then a fresh
// estimate (which is saved).
std::pair<double, double> plant_constants(const Session& s, const BlackBoxSystem& sys) {
  if (s.cfg.lx && s.cfg.lu) {
    return {*s.cfg.lx, *s.cfg.lu};
  }
  const fs::path file = s.artifact("lipschitz.txt");
  if (fs::exists(file)) {
    return read_lipschitz_file(file);
  }
  const PlantLipschitz pl = estimate(s, sys);
  write_lipschitz_file(file, pl);
  return {s.cfg.lx.value_or(pl.lx), s.cfg.lu.value_or(pl.lu)};
}

Problem build_problem(const Session& s) {
  BlackBoxSystem sys = s.cfg.make_system();
  const auto [lx, lu] = plant_constants(s, sys);
  return make_problem(std::move(sys), s.cfg.hp, lx, lu, s.cfg.cover_budget);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void report_certificate(std::ostream& out, const Certificate& c) {
  out << "eta* = " << format_double(c.eta_star) << "  L = " << format_double(c.overall_L)
      << "  eps = " << format_double(c.eps) << "  margin = " << format_double(c.margin) << '\n';
  for (const auto& v : c.lipschitz) {
    out << "  " << v.bound_name << " <= " << format_double(v.bound) << ": "
        << (v.certified ? "certified" : "not certified") << '\n';
  }
  out << (c.certified ? "certified" : "not certified") << '\n';
}

int cmd_gen_data(Session& s) {
  const BlackBoxSystem sys = s.cfg.make_system();
  const SampleCover xs = build_cover(sys.state_domain, s.cfg.hp.eps_x, s.cfg.cover_budget);
  const SampleCover ws = build_cover(sys.external_domain, s.cfg.hp.eps_w, s.cfg.cover_budget);
  write_cover(s.artifact("cover_x.csv"), xs);
  write_cover(s.artifact("cover_w.csv"), ws);
  s.out << "cover_x: " << xs.size() << " points, eps " << format_double(xs.radius) << '\n';
  s.out << "cover_w: " << ws.size() << " points, eps " << format_double(ws.radius) << '\n';
  if (s.opt.probe) {
    for (const auto* c : {&xs, &ws}) {
      const CoverVerdict v = verify_cover(*c, *s.opt.probe, s.seed());
      s.out << "probe: worst distance " << format_double(v.worst_distance)
            << (v.passed ? " ok" : " FAILED") << '\n';
      if (!v.passed) return kExitError;
    }
  }
  return kExitOk;
}

int cmd_estimate_lipschitz(Session& s) {
  const BlackBoxSystem sys = s.cfg.make_system();
  const PlantLipschitz pl = estimate(s, sys);
  write_lipschitz_file(s.artifact("lipschitz.txt"), pl);
  s.out << "L_x = " << format_double(pl.lx) << '\n' << "L_u = " << format_double(pl.lu) << '\n';
  return kExitOk;
}

Certificate finish_certificate(const Session& s, Certificate c) {
  c.config_hash = s.config_hash();
  return c;
}

int cmd_train(Session& s) {
  const Problem p = build_problem(s);
  write_cover(s.artifact("cover_x.csv"), p.xs);
  write_cover(s.artifact("cover_w.csv"), p.ws);
  auto observer = [&](const HistoryRow& r) {
    s.out << "epoch " << r.epoch << "  L = " << format_double(r.loss_main)
          << "  eta* = " << format_double(r.eta_star)
          << "  margin = " << format_double(r.eta_star + r.overall_L * p.hp.eps())
          << (r.psd_ok ? "  psd ok" : "  psd failing") << '\n';
  };
  const TrainResult result = train(p, s.cfg.arch, s.seed(), observer);
  save_net(s.artifact("clf.weights"), result.v);
  save_net(s.artifact("controller.weights"), result.g);
  save_multipliers(s.artifact("multipliers.txt"), result.multipliers);
  write_history(s.artifact("history.csv"), result.history);

  const Certificate c =
      finish_certificate(s, certify(result.v, result.g, result.multipliers, result.eta, p));
  nlohmann::json j = c.to_json();
  j["training"] = {{"converged", result.converged},
                   {"epochs_run", result.epochs_run},
                   {"best_epoch", result.best_epoch}};
  write_json(s.artifact("certificate.json"), j);
  report_certificate(s.out, c);
  return result.converged ? kExitOk : kExitNotConverged;
}

int cmd_verify(Session& s) {
  const fs::path clf = s.existing(s.cfg.clf_weights, "clf.weights");
  const fs::path ctrl = s.existing(s.cfg.controller_weights, "controller.weights");
  const fs::path mult = s.existing(s.cfg.multipliers, "multipliers.txt");
  const FeedforwardNet v = load_net(clf);
  const FeedforwardNet g = load_net(ctrl);
  const Multipliers m = load_multipliers(mult);

  const Problem p = build_problem(s);
  Certificate c = finish_certificate(s, certify(v, g, m, 0.0, p));

  const std::size_t probes = s.opt.probe.value_or(s.cfg.probes);
  nlohmann::json covers = nlohmann::json::array();
  bool covers_ok = true;
  for (const auto* cover : {&p.xs, &p.ws}) {
    const CoverVerdict cv = verify_cover(*cover, probes, s.seed());
    covers_ok = covers_ok && cv.passed;
    covers.push_back({{"points", cover->size()},
                      {"eps", cover->radius},
                      {"probes", cv.probes},
                      {"worst_distance", cv.worst_distance},
                      {"passed", cv.passed}});
  }
  c.certified = c.certified && covers_ok;
  nlohmann::json j = c.to_json();
  j["verdict"] = c.certified ? "certified" : "not-certified";
  j["covers"] = covers;
  write_json(s.artifact("certificate.json"), j);
  report_certificate(s.out, c);
  if (!covers_ok) s.out << "cover check failed\n";
  return c.certified ? kExitOk : kExitNotCertified;
}

int cmd_simulate(Session& s) {
  const auto& sim = s.cfg.sim;
  if (sim.x0.empty()) {
    throw ConfigError("[simulate] lists no x0 cases");
  }
  const BlackBoxSystem sys = s.cfg.make_system();
  const FeedforwardNet g = load_net(s.existing(s.cfg.controller_weights, "controller.weights"));
  const SaturationBox box(sys.input_domain.lo, sys.input_domain.hi);
  for (std::size_t i = 0; i < sim.x0.size(); ++i) {
    const Vector& x0 = sim.x0[i];
    if (x0.size() != static_cast<Eigen::Index>(sys.state_dim)) {
      throw DomainError("x0 case " + std::to_string(i) + " has the wrong dimension");
    }
    if (!sys.state_domain.contains(x0, 0.0)) {
      throw DomainError("x0 case " + std::to_string(i) + " lies outside the state box");
    }
  }
  for (std::size_t i = 0; i < sim.x0.size(); ++i) {
    const Vector w = sim.w.empty() ? sys.external_domain.center()
                                   : sim.w[sim.w.size() == 1 ? 0 : i];
    if (!sys.external_domain.contains(w, 0.0)) {
      throw DomainError("w case " + std::to_string(i) + " lies outside the external input box");
    }
    const Trajectory traj = simulate_closed_loop(
        sys, g, box, sim.x0[i], [w](double) { return w; }, sim.dt, sim.t_end);
    const fs::path path = s.artifact("traj_" + std::to_string(i) + ".csv");
    write_trajectory(path, traj);
    const bool inside = std::all_of(traj.states.begin(), traj.states.end(), [&](const Vector& x) {
      return sys.state_domain.contains(x, 0.0);
    });
    s.out << path.filename().string() << ": " << traj.times.size() << " samples"
          << (inside ? "" : ", left the state box") << '\n';
  }
  return kExitOk;
}

int cmd_kl_bounds(Session& s) {
  const KlEnvelope env = kl_envelope(s.cfg.hp);
  const auto& k = s.cfg.kl;
  if (k.points < 2) {
    throw ConfigError("[kl] points must be at least 2");
  }
  const fs::path path = s.artifact("kl_bounds.csv");
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  const auto step = [&](double max, std::size_t i) {
    return max * static_cast<double>(i) / static_cast<double>(k.points - 1);
  };
  os << "function,s,t,value\n";
  for (std::size_t i = 0; i < k.points; ++i) {
    for (std::size_t j = 0; j < k.points; ++j) {
      os << "beta," << format_double(step(k.s_max, i)) << ',' << format_double(step(k.t_max, j))
         << ',' << format_double(env.beta(step(k.s_max, i), step(k.t_max, j))) << '\n';
    }
  }
  for (std::size_t i = 0; i < k.points; ++i) {
    os << "gamma," << format_double(step(k.r_max, i)) << ",,"
       << format_double(env.gamma(step(k.r_max, i))) << '\n';
  }
  s.out << "wrote " << path.string() << '\n';
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint synthesis and certification of incremental stability certificates"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Options opt;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::size_t probe = 0;
  app.add_option("--config", opt.config, "Run configuration file")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Override the configured seed");
  app.add_option("--out", opt.out, "Output directory");
  auto* epochs_opt = app.add_option("--epochs", epochs, "Override the number of epochs");
  auto* probe_opt = app.add_option("--probe", probe, "Random probes for cover checks");

  using Handler = int (*)(Session&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands{
      {"gen-data", "Write the state and input covers", cmd_gen_data},
      {"estimate-lipschitz", "Estimate the plant Lipschitz constants", cmd_estimate_lipschitz},
      {"train", "Train the certificate and controller", cmd_train},
      {"verify", "Recompute the certificate from saved weights", cmd_verify},
      {"simulate", "Simulate the closed loop", cmd_simulate},
      {"kl-bounds", "Tabulate the KL envelope", cmd_kl_bounds},
  };
  for (const auto& [name, help, fn] : commands) {
    app.add_subcommand(name, help);
  }

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }
  if (*seed_opt) opt.seed = seed;
  if (*epochs_opt) opt.epochs = epochs;
  if (*probe_opt) opt.probe = probe;

  try {
    Session s{parse_config(opt.config), opt, out};
    if (opt.seed) s.cfg.hp.seed = *opt.seed;
    if (opt.epochs) s.cfg.hp.epochs = *opt.epochs;
    fs::create_directories(opt.out);
    for (const auto& [name, help, fn] : commands) {
      if (app.got_subcommand(name)) {
        return fn(s);
      }
    }
    return kExitError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

}  // namespace incstab
