#include "incstab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "incstab/errors.hpp"
#include "incstab/hash.hpp"
#include "incstab/net_io.hpp"
#include "incstab/trace.hpp"

namespace incstab {

namespace {

constexpr double kSqrt2 = std::numbers::sqrt2;

double power(double s, double gamma) { return s == 0.0 ? 0.0 : std::pow(s, gamma); }

Vector joined(const Vector& a, const Vector& b) {
  Vector z(a.size() + b.size());
  z << a, b;
  return z;
}

Vector squared(const Vector& v) { return v.array().square().matrix(); }

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double require(const std::optional<double>& v, const char* name) {
  if (!v) {
    throw IncompleteBudgetError(name);
  }
  return *v;
}

}  // namespace

void HyperParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string(name) + " must be positive");
    }
  };
  positive(k1, "k1");
  positive(k2, "k2");
  positive(kw, "kw");
  positive(kappa, "kappa");
  positive(mu_h, "mu_h");
  positive(lip_L, "lip_L");
  positive(lip_dL, "lip_dL");
  positive(lip_C, "lip_C");
  positive(eps_x, "eps_x");
  positive(eps_w, "eps_w");
  positive(lr_net, "lr_net");
  positive(lr_scalar, "lr_scalar");
  positive(barrier_gain, "barrier_gain");
  for (double g : {gamma1, gamma2, gammaw}) {
    if (!(g >= 1.0)) {
      throw ConfigError("class-K exponents must be >= 1");
    }
  }
  for (double w : c) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  }
  for (double w : cl) {
    if (!(w >= 0.0)) throw ConfigError("log-det weights must be nonnegative");
  }
  if (!(cv >= 0.0)) {
    throw ConfigError("validity weight must be nonnegative");
  }
  if (batch_size == 0 || n_batches == 0) {
    throw ConfigError("batch_size and n_batches must be at least 1");
  }
}

double class_k_lipschitz(double k, double gamma, double diameter) {
  return k * gamma * std::pow(diameter, gamma - 1.0);
}

double compose_overall_L(const LipschitzBudget& b, double kappa, double mu_h) {
  const double lx = require(b.lx, "L_x");
  const double lu = require(b.lu, "L_u");
  const double lip_L = require(b.lip_L, "L_L");
  const double lip_dL = require(b.lip_dL, "L_dL");
  const double lip_C = require(b.lip_C, "L_C");
  const double sl1 = require(b.sl1, "sL_1");
  const double sl2 = require(b.sl2, "sL_2");
  const double slu = require(b.slu, "sL_u");
  const double lh = require(b.lh, "L_h");
  const double ldh = require(b.ldh, "L_dh");
  const double mh = require(b.mh, "M_h");
  const double ml = require(b.ml, "M_L");
  const double mf = require(b.mf, "M_f");
  const double plant_gain = lx + kSqrt2 * lu * lip_C;
  const double t1 = kSqrt2 * lip_L + 2.0 * sl1;
  const double t2 = kSqrt2 * lip_L + 2.0 * sl2;
  const double t3 = kSqrt2 * kappa * lip_L + 2.0 * slu + 2.0 * (mf * lip_dL + ml * plant_gain);
  const double t4 = mf * ldh + mh * plant_gain + mu_h * lh;
  return std::max({t1, t2, t3, t4});
}

Problem make_problem(BlackBoxSystem sys, const HyperParams& hp, double lx, double lu,
                     std::size_t cover_budget) {
  hp.validate();
  Problem p;
  p.xs = build_cover(sys.state_domain, hp.eps_x, cover_budget);
  p.ws = build_cover(sys.external_domain, hp.eps_w, cover_budget);
  p.barrier = BoxBarrier(sys.state_domain, hp.barrier_gain);
  p.box = SaturationBox(sys.input_domain.lo, sys.input_domain.hi);
  p.sys = std::move(sys);
  p.hp = hp;
  p.lx = lx;
  p.lu = lu;
  return p;
}

Multipliers Multipliers::ones_for(const FeedforwardNet& v, const FeedforwardNet& g) {
  const auto hv = static_cast<Eigen::Index>(v.total_hidden());
  return {Vector::Ones(hv), Vector::Ones(hv),
          Vector::Ones(static_cast<Eigen::Index>(g.total_hidden()))};
}

void save_multipliers(const std::filesystem::path& path, const Multipliers& m) {
  std::ofstream os(path);
  if (!os) {
    throw ConfigError("cannot write " + path.string());
  }
  os << "incstab-multipliers 1\n";
  os << "clf " << m.clf.size() << '\n';
  write_vector_line(os, m.clf);
  os << "clf_derivative " << m.clf_derivative.size() << '\n';
  write_vector_line(os, m.clf_derivative);
  os << "controller " << m.controller.size() << '\n';
  write_vector_line(os, m.controller);
}

Multipliers load_multipliers(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw ConfigError("cannot open multiplier file " + path.string());
  }
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "incstab-multipliers" || version != 1) {
    throw ConfigError(path.string() + ": not a multiplier file");
  }
  Multipliers m;
  for (auto [name, target] : {std::pair<const char*, Vector*>{"clf", &m.clf},
                              {"clf_derivative", &m.clf_derivative},
                              {"controller", &m.controller}}) {
    std::size_t n = 0;
    if (!(is >> tag >> n) || tag != name) {
      throw ConfigError(path.string() + ": expected section '" + name + "'");
    }
    *target = read_vector_line(is, n);
  }
  return m;
}

namespace {

struct PairValue {
  double v;
  Vector gq;
  Vector gr;
};

PairValue eval_pair(const FeedforwardNet& v, const Vector& xq, const Vector& xr) {
  const Vector z = joined(xq, xr);
  const Vector grad = input_gradient(v, z);
  const auto n = xq.size();
  return {forward(v, z)[0], grad.head(n), grad.tail(n)};
}

Vector closed_loop_field(const FeedforwardNet& g, const Problem& p, const Vector& x,
                         const Vector& w) {
  return eval_dynamics(p.sys, x, saturated_output(g, x, w, p.box));
}

void check_networks(const FeedforwardNet& v, const FeedforwardNet& g, const Problem& p) {
  v.require_clf_role();
  const std::size_t n = p.sys.state_dim;
  if (v.input_dim() != 2 * n) {
    throw ContractViolation("CLF network must take 2n = " + std::to_string(2 * n) + " inputs");
  }
  if (g.input_dim() != n + p.ws.domain.dim() || g.output_dim() != p.sys.input_dim) {
    throw ContractViolation("controller network has the wrong shape for this plant");
  }
}

}  // namespace

ResidualBundle scp_residuals(const FeedforwardNet& v, const FeedforwardNet& g, const Problem& p,
                             const PairBatch& batch) {
  check_networks(v, g, p);
  const HyperParams& hp = p.hp;
  std::vector<double> ra, rb, rc, rd;
  for (const auto& t : batch) {
    const Vector& xq = p.xs.points.at(t.xq);
    const Vector& xr = p.xs.points.at(t.xr);
    const Vector& wq = p.ws.points.at(t.wq);
    const Vector& wr = p.ws.points.at(t.wr);
    const PairValue pv = eval_pair(v, xq, xr);
    const Vector fq = closed_loop_field(g, p, xq, wq);
    const Vector fr = closed_loop_field(g, p, xr, wr);
    const double dist = (xq - xr).norm();
    if (!t.flagged) {
      ra.push_back(-pv.v + hp.k1 * power(dist, hp.gamma1));
      rb.push_back(pv.v - hp.k2 * power(dist, hp.gamma2));
    }
    rc.push_back(pv.gq.dot(fq) + pv.gr.dot(fr) + hp.kappa * pv.v -
                 hp.kw * power((wq - wr).norm(), hp.gammaw));
    rd.push_back(-p.barrier.gradient(xq).dot(fq) - hp.mu_h * p.barrier.value(xq));
  }
  auto to_vec = [](const std::vector<double>& s) {
    return Vector(Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size())));
  };
  return {to_vec(ra), to_vec(rb), to_vec(rc), to_vec(rd)};
}

double ResidualMaxima::eta_star() const { return std::max({a, b, c, d}); }

ResidualMaxima full_dataset_residuals(const FeedforwardNet& v, const FeedforwardNet& g,
                                      const Problem& p) {
  check_networks(v, g, p);
  const HyperParams& hp = p.hp;
  const std::size_t N = p.xs.size();
  const std::size_t M = p.ws.size();
  const double d_min = hp.pair_exclusion();

  // field[q * M + j] = f(x_q, sat(g(x_q, w_j)))
  std::vector<Vector> field(N * M);
  ResidualMaxima out;
  for (std::size_t q = 0; q < N; ++q) {
    const Vector& x = p.xs.points[q];
    const Vector grad_h = p.barrier.gradient(x);
    const double h = p.barrier.value(x);
    for (std::size_t j = 0; j < M; ++j) {
      field[q * M + j] = closed_loop_field(g, p, x, p.ws.points[j]);
      out.d = std::max(out.d, -grad_h.dot(field[q * M + j]) - hp.mu_h * h);
    }
  }

  std::vector<double> input_gap(M * M);
  for (std::size_t j = 0; j < M; ++j) {
    for (std::size_t l = 0; l < M; ++l) {
      input_gap[j * M + l] = hp.kw * power((p.ws.points[j] - p.ws.points[l]).norm(), hp.gammaw);
    }
  }

  std::vector<double> a_terms(M);
  std::vector<double> b_terms(M);
  for (std::size_t q = 0; q < N; ++q) {
    for (std::size_t r = 0; r < N; ++r) {
      const PairValue pv = eval_pair(v, p.xs.points[q], p.xs.points[r]);
      const double dist = (p.xs.points[q] - p.xs.points[r]).norm();
      if (dist >= d_min) {
        out.a = std::max(out.a, -pv.v + hp.k1 * power(dist, hp.gamma1));
        out.b = std::max(out.b, pv.v - hp.k2 * power(dist, hp.gamma2));
      }
      double max_a = -std::numeric_limits<double>::infinity();
      double max_b = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < M; ++j) {
        a_terms[j] = pv.gq.dot(field[q * M + j]);
        b_terms[j] = pv.gr.dot(field[r * M + j]);
        max_a = std::max(max_a, a_terms[j]);
        max_b = std::max(max_b, b_terms[j]);
      }
      const double base = hp.kappa * pv.v;
      // The input-gap term is never positive, so this bounds every tuple.
      if (max_a + max_b + base <= out.c) {
        continue;
      }
      for (std::size_t j = 0; j < M; ++j) {
        if (a_terms[j] + max_b + base <= out.c) {
          continue;
        }
        for (std::size_t l = 0; l < M; ++l) {
          out.c = std::max(out.c, a_terms[j] + b_terms[l] + base - input_gap[j * M + l]);
        }
      }
    }
  }
  return out;
}

double loss_main(const ResidualBundle& r, double eta, const HyperParams& hp) {
  auto hinge_sum = [eta](const Vector& v) { return (v.array() - eta).max(0.0).sum(); };
  return hp.c[0] * hinge_sum(r.ra) + hp.c[1] * hinge_sum(r.rb) + hp.c[2] * hinge_sum(r.rc) +
         hp.c[3] * hinge_sum(r.rd);
}

double loss_lipschitz(const FeedforwardNet& v, const FeedforwardNet& g, const Multipliers& m,
                      const HyperParams& hp) {
  double total = 0.0;
  if (hp.cl[0] != 0.0) {
    total += hp.cl[0] * logdet_penalty(make_lipsdp_problem(v, squared(m.clf), hp.lip_L)).value;
  }
  if (hp.cl[1] != 0.0) {
    total += hp.cl[1] * derivative_logdet_penalty(v, squared(m.clf_derivative), hp.lip_dL).value;
  }
  if (hp.cl[2] != 0.0) {
    total +=
        hp.cl[2] * logdet_penalty(make_lipsdp_problem(g, squared(m.controller), hp.lip_C)).value;
  }
  return total;
}

double loss_validity(double eta, double overall_L, double eps) { return overall_L * eps + eta; }

LipschitzBudget resolve_budget(const FeedforwardNet& g, const Problem& p) {
  const HyperParams& hp = p.hp;
  LipschitzBudget b;
  b.lx = p.lx;
  b.lu = p.lu;
  b.lip_L = hp.lip_L;
  b.lip_dL = hp.lip_dL;
  b.lip_C = hp.lip_C;
  b.sl1 = class_k_lipschitz(hp.k1, hp.gamma1, p.xs.domain.diameter());
  b.sl2 = class_k_lipschitz(hp.k2, hp.gamma2, p.xs.domain.diameter());
  b.slu = class_k_lipschitz(hp.kw, hp.gammaw, p.ws.domain.diameter());
  const BarrierConstants bc = p.barrier.constants();
  b.lh = bc.lh;
  b.ldh = bc.ldh;
  b.mh = bc.mh;
  b.ml = hp.lip_L;
  auto controller = [&](const Vector& x, const Vector& w) {
    return saturated_output(g, x, w, p.box);
  };
  b.mf = estimate_dynamics_bound(p.sys, p.xs, controller, p.ws, p.lx + kSqrt2 * p.lu * hp.lip_C);
  return b;
}

void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream os(path);
  if (!os) {
    throw ConfigError("cannot write " + path.string());
  }
  os << "epoch,L,L_M,L_v,eta,eta_star,worst_a,worst_b,worst_c,worst_d,overall_L,psd_ok\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << format_double(r.loss_main) << ',' << format_double(r.loss_lipschitz)
       << ',' << format_double(r.loss_validity) << ',' << format_double(r.eta) << ','
       << format_double(r.eta_star) << ',' << format_double(r.worst.a) << ','
       << format_double(r.worst.b) << ',' << format_double(r.worst.c) << ','
       << format_double(r.worst.d) << ',' << format_double(r.overall_L) << ','
       << (r.psd_ok ? 1 : 0) << '\n';
  }
}

std::string cover_hash(const SampleCover& c) {
  std::string text = "eps " + format_double(c.radius) + '\n';
  for (const auto& pnt : c.points) {
    for (Eigen::Index i = 0; i < pnt.size(); ++i) {
      text += format_double(pnt[i]);
      text += ' ';
    }
    text += '\n';
  }
  return sha256_hex(text);
}

std::string net_hash(const FeedforwardNet& n) {
  std::ostringstream os;
  write_net(os, n);
  return sha256_hex(os.str());
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

// JSON has no infinities; they only appear for empty residual families.
nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::array<LipschitzVerdict, 3> lipschitz_verdicts(const FeedforwardNet& v,
                                                   const FeedforwardNet& g, const Multipliers& m,
                                                   const HyperParams& hp) {
  return {certify_network_lipschitz(v, hp.lip_L, squared(m.clf), "L_L"),
          certify_gradient_lipschitz(v, hp.lip_dL, squared(m.clf_derivative), "L_dL"),
          certify_network_lipschitz(g, hp.lip_C, squared(m.controller), "L_C")};
}

bool all_certified(const std::array<LipschitzVerdict, 3>& v) {
  return std::all_of(v.begin(), v.end(), [](const LipschitzVerdict& x) { return x.certified; });
}

}  // namespace

nlohmann::json Certificate::to_json() const {
  nlohmann::json j;
  j["verdict"] = certified ? "certified" : "not-certified";
  j["eta_star"] = finite_or_null(eta_star);
  j["overall_L"] = overall_L;
  j["eps"] = eps;
  j["margin"] = finite_or_null(margin);
  j["eta_trained"] = eta_trained;
  j["losses"] = {{"main", finite_or_null(loss_main)},
                 {"lipschitz", loss_lipschitz},
                 {"validity", finite_or_null(loss_validity)}};
  j["worst_residuals"] = {{"a", finite_or_null(worst.a)},
                          {"b", finite_or_null(worst.b)},
                          {"c", finite_or_null(worst.c)},
                          {"d", finite_or_null(worst.d)}};
  nlohmann::json lv = nlohmann::json::array();
  for (const auto& v : lipschitz) {
    lv.push_back({{"bound_name", v.bound_name},
                  {"bound", v.bound},
                  {"certified", v.certified},
                  {"min_pivot", finite_or_null(v.min_pivot)},
                  {"min_pivot_index", v.min_pivot_index},
                  {"lambda_hash", v.lambda_hash}});
  }
  j["lipschitz"] = lv;
  j["budget"] = {{"L_x", optional_json(budget.lx)},     {"L_u", optional_json(budget.lu)},
                 {"L_L", optional_json(budget.lip_L)},  {"L_dL", optional_json(budget.lip_dL)},
                 {"L_C", optional_json(budget.lip_C)},  {"sL_1", optional_json(budget.sl1)},
                 {"sL_2", optional_json(budget.sl2)},   {"sL_u", optional_json(budget.slu)},
                 {"L_h", optional_json(budget.lh)},     {"L_dh", optional_json(budget.ldh)},
                 {"M_h", optional_json(budget.mh)},     {"M_L", optional_json(budget.ml)},
                 {"M_f", optional_json(budget.mf)}};
  j["diagnostics"] = {{"d_min", d_min},
                      {"diagonal_max_abs_v", diagonal_max_abs_v},
                      {"barrier_eta_lower_bound", barrier_eta_lower_bound},
                      {"margin_lower_bound", margin_lower_bound}};
  j["provenance"] = {{"seed", seed},
                     {"config_hash", config_hash},
                     {"cover_x_hash", cover_x_hash},
                     {"cover_w_hash", cover_w_hash},
                     {"clf_hash", clf_hash},
                     {"controller_hash", controller_hash}};
  return j;
}

void finalize_verdict(Certificate& c) {
  c.margin = loss_validity(c.eta_star, c.overall_L, c.eps);
  c.loss_validity = c.margin;
  c.certified = std::isfinite(c.margin) && c.margin <= 0.0 && all_certified(c.lipschitz) &&
                c.loss_main == 0.0;
}

Certificate certify(const FeedforwardNet& v, const FeedforwardNet& g, const Multipliers& m,
                    double eta, const Problem& p) {
  const HyperParams& hp = p.hp;
  Certificate c;
  c.worst = full_dataset_residuals(v, g, p);
  c.eta_star = c.worst.eta_star();
  c.budget = resolve_budget(g, p);
  c.overall_L = compose_overall_L(c.budget, hp.kappa, hp.mu_h);
  c.eps = hp.eps();
  c.eta_trained = eta;
  c.lipschitz = lipschitz_verdicts(v, g, m, hp);
  // Every residual is <= its maximum, so the hinge loss at eta_star is zero
  // unless a residual is not a number.
  c.loss_main = std::isfinite(c.eta_star) ? 0.0 : std::numeric_limits<double>::infinity();
  c.loss_lipschitz = loss_lipschitz(v, g, m, hp);
  c.d_min = hp.pair_exclusion();

  double diag = 0.0;
  double lower = -std::numeric_limits<double>::infinity();
  for (const auto& x : p.xs.points) {
    diag = std::max(diag, std::abs(forward(v, joined(x, x))[0]));
    lower = std::max(lower, -p.barrier.gradient(x).norm() * *c.budget.mf -
                                hp.mu_h * p.barrier.value(x));
  }
  c.diagonal_max_abs_v = diag;
  c.barrier_eta_lower_bound = lower;
  c.margin_lower_bound = lower + c.overall_L * c.eps;

  c.seed = hp.seed;
  c.cover_x_hash = cover_hash(p.xs);
  c.cover_w_hash = cover_hash(p.ws);
  c.clf_hash = net_hash(v);
  c.controller_hash = net_hash(g);
  finalize_verdict(c);
  return c;
}

LossGradients batch_loss_gradients(const FeedforwardNet& v, const FeedforwardNet& g,
                                   const Multipliers& m, double eta, double overall_L,
                                   const Problem& p, const PairBatch& batch) {
  check_networks(v, g, p);
  const HyperParams& hp = p.hp;
  const auto n = static_cast<std::size_t>(p.sys.state_dim);
  LossTrace trace({&v, &g}, 1);
  const auto eta_node = trace.scalar_parameter(0, eta);

  auto field_node = [&](const Vector& x, const Vector& w) {
    const auto x_node = trace.constant(x);
    const auto raw = trace.net_eval(1, trace.constant(joined(x, w)));
    const auto u = trace.saturate(raw, p.box);
    const Vector& u_val = trace.value(u);
    const PlantJacobians jac = jacobians_fd(p.sys, x, u_val);
    return trace.black_box(x_node, u, eval_dynamics(p.sys, x, u_val), std::nullopt, jac.du);
  };
  auto hinge_term = [&](LossTrace::Node r, double weight) {
    return trace.scale(trace.hinge(trace.sub(r, eta_node)), weight);
  };

  std::vector<LossTrace::Node> terms;
  for (const auto& t : batch) {
    const Vector& xq = p.xs.points.at(t.xq);
    const Vector& xr = p.xs.points.at(t.xr);
    const Vector& wq = p.ws.points.at(t.wq);
    const Vector& wr = p.ws.points.at(t.wr);
    const auto vg = trace.net_eval(0, trace.constant(joined(xq, xr)), true);
    const auto v_node = trace.slice(vg, 0, 1);
    const auto gq = trace.slice(vg, 1, n);
    const auto gr = trace.slice(vg, 1 + n, n);
    const auto fq = field_node(xq, wq);
    const auto fr = field_node(xr, wr);
    if (!t.flagged) {
      const double dist = (xq - xr).norm();
      const auto ra = trace.offset(trace.scale(v_node, -1.0), hp.k1 * power(dist, hp.gamma1));
      const auto rb = trace.offset(v_node, -hp.k2 * power(dist, hp.gamma2));
      terms.push_back(hinge_term(ra, hp.c[0]));
      terms.push_back(hinge_term(rb, hp.c[1]));
    }
    const auto flow = trace.add(trace.dot(gq, fq), trace.dot(gr, fr));
    const auto rc = trace.offset(trace.add(flow, trace.scale(v_node, hp.kappa)),
                                 -hp.kw * power((wq - wr).norm(), hp.gammaw));
    terms.push_back(hinge_term(rc, hp.c[2]));
    const auto rd = trace.offset(trace.dot(trace.constant(-p.barrier.gradient(xq)), fq),
                                 -hp.mu_h * p.barrier.value(xq));
    terms.push_back(hinge_term(rd, hp.c[3]));
  }
  const auto root = trace.sum(terms);
  TraceGradients tg = trace.backward(root);

  LossGradients out;
  out.loss_main = trace.scalar(root);
  out.v = std::move(tg.nets[0]);
  out.g = std::move(tg.nets[1]);
  out.eta = tg.scalars[0];

  out.loss_validity = hp.cv * loss_validity(eta, overall_L, hp.eps());
  out.eta += hp.cv;

  out.multipliers = {Vector::Zero(m.clf.size()), Vector::Zero(m.clf_derivative.size()),
                     Vector::Zero(m.controller.size())};
  auto absorb = [](const LogdetPenalty& pen, double weight, NetGradients& grads, Vector& lam_grad,
                   const Vector& lam) {
    for (std::size_t i = 0; i < pen.weight_grads.size(); ++i) {
      grads.weights[i] += weight * pen.weight_grads[i];
    }
    // Lambda = lam^2.
    lam_grad += weight * 2.0 * lam.cwiseProduct(pen.lambda_grad);
  };
  if (hp.cl[0] != 0.0) {
    const auto pen = logdet_penalty(make_lipsdp_problem(v, squared(m.clf), hp.lip_L));
    out.loss_lipschitz += hp.cl[0] * pen.value;
    absorb(pen, hp.cl[0], out.v, out.multipliers.clf, m.clf);
  }
  if (hp.cl[1] != 0.0) {
    const auto pen = derivative_logdet_penalty(v, squared(m.clf_derivative), hp.lip_dL);
    out.loss_lipschitz += hp.cl[1] * pen.value;
    absorb(pen, hp.cl[1], out.v, out.multipliers.clf_derivative, m.clf_derivative);
  }
  if (hp.cl[2] != 0.0) {
    const auto pen = logdet_penalty(make_lipsdp_problem(g, squared(m.controller), hp.lip_C));
    out.loss_lipschitz += hp.cl[2] * pen.value;
    absorb(pen, hp.cl[2], out.g, out.multipliers.controller, m.controller);
  }
  return out;
}

namespace {

struct TrainState {
  FeedforwardNet v;
  FeedforwardNet g;
  Multipliers m;
  double eta = 0.0;
};

// Flat view of every trainable quantity, in a fixed order.
class ParameterLayout {
 public:
  explicit ParameterLayout(const TrainState& s) {
    for (const auto* net : {&s.v, &s.g}) {
      for (std::size_t i = 0; i < net->weights().size(); ++i) {
        net_params_ += static_cast<std::size_t>(net->weights()[i].size() + net->biases()[i].size());
      }
    }
    size_ = net_params_ + 1 + static_cast<std::size_t>(s.m.clf.size() + s.m.clf_derivative.size() +
                                                       s.m.controller.size());
  }

  std::size_t size() const { return size_; }

  Vector learning_rates(const HyperParams& hp) const {
    Vector lr = Vector::Constant(static_cast<Eigen::Index>(size_), hp.lr_scalar);
    lr.head(static_cast<Eigen::Index>(net_params_)).setConstant(hp.lr_net);
    return lr;
  }

  Vector pack(const TrainState& s) const {
    Vector out(static_cast<Eigen::Index>(size_));
    Eigen::Index k = 0;
    auto put = [&](const auto& block) {
      const Eigen::Index n = block.size();
      out.segment(k, n) = Eigen::Map<const Vector>(block.data(), n);
      k += n;
    };
    for (const auto* net : {&s.v, &s.g}) {
      for (std::size_t i = 0; i < net->weights().size(); ++i) {
        put(net->weights()[i]);
        put(net->biases()[i]);
      }
    }
    out[k++] = s.eta;
    put(s.m.clf);
    put(s.m.clf_derivative);
    put(s.m.controller);
    return out;
  }

  Vector pack(const LossGradients& g) const {
    Vector out(static_cast<Eigen::Index>(size_));
    Eigen::Index k = 0;
    auto put = [&](const auto& block) {
      const Eigen::Index n = block.size();
      out.segment(k, n) = Eigen::Map<const Vector>(block.data(), n);
      k += n;
    };
    for (const auto* grads : {&g.v, &g.g}) {
      for (std::size_t i = 0; i < grads->weights.size(); ++i) {
        put(grads->weights[i]);
        put(grads->biases[i]);
      }
    }
    out[k++] = g.eta;
    put(g.multipliers.clf);
    put(g.multipliers.clf_derivative);
    put(g.multipliers.controller);
    return out;
  }

  void unpack(const Vector& flat, TrainState& s) const {
    Eigen::Index k = 0;
    auto take = [&](auto& block) {
      const Eigen::Index n = block.size();
      Eigen::Map<Vector>(block.data(), n) = flat.segment(k, n);
      k += n;
    };
    for (auto* net : {&s.v, &s.g}) {
      for (std::size_t i = 0; i < net->weights().size(); ++i) {
        take(net->weight(i));
        take(net->bias(i));
      }
    }
    s.eta = flat[k++];
    take(s.m.clf);
    take(s.m.clf_derivative);
    take(s.m.controller);
  }

 private:
  std::size_t net_params_ = 0;
  std::size_t size_ = 0;
};

class Adam {
 public:
  Adam(Vector lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(std::move(lr)),
        m_(Vector::Zero(lr_.size())),
        v_(Vector::Zero(lr_.size())),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {}

  void step(Vector& params, const Vector& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.array() -=
        lr_.array() * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Vector lr_;
  Vector m_;
  Vector v_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
};

}  // namespace

TrainResult train(const Problem& p, const Architecture& arch, std::uint64_t seed,
                  const EpochObserver& observer) {
  const HyperParams& hp = p.hp;
  hp.validate();
  std::mt19937_64 rng(seed);
  const std::size_t n = p.sys.state_dim;
  TrainState state;
  state.v = FeedforwardNet::random(2 * n, arch.clf_hidden, 1, arch.clf_activation, rng,
                                   hp.init_scale);
  state.g = FeedforwardNet::random(n + p.ws.domain.dim(), arch.ctrl_hidden, p.sys.input_dim,
                                   arch.ctrl_activation, rng, hp.init_scale);
  state.m = Multipliers::ones_for(state.v, state.g);
  state.eta = 0.0;
  check_networks(state.v, state.g, p);

  TrainResult result;
  result.v = state.v;
  result.g = state.g;
  result.multipliers = state.m;
  result.eta = state.eta;
  if (hp.epochs == 0) {
    return result;
  }

  const ParameterLayout layout(state);
  Adam adam(layout.learning_rates(hp));
  Vector flat = layout.pack(state);
  double overall_L = compose_overall_L(resolve_budget(state.g, p), hp.kappa, hp.mu_h);

  bool have_best = false;
  bool best_psd = false;
  double best_margin = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    const auto batches = make_pair_batches(p.xs, p.ws, hp.batch_size, hp.n_batches,
                                           hp.pair_exclusion(), mix_seed(seed, epoch));
    HistoryRow row;
    row.epoch = epoch;
    for (const auto& batch : batches) {
      const LossGradients grads =
          batch_loss_gradients(state.v, state.g, state.m, state.eta, overall_L, p, batch);
      row.loss_main += grads.loss_main;
      row.loss_lipschitz = grads.loss_lipschitz;
      Vector grad = layout.pack(grads);
      if (!grad.allFinite()) {
        throw Error("non-finite gradient in epoch " + std::to_string(epoch));
      }
      adam.step(flat, grad);
      layout.unpack(flat, state);
    }

    // Full-dataset convergence check.
    row.worst = full_dataset_residuals(state.v, state.g, p);
    row.eta_star = row.worst.eta_star();
    overall_L = compose_overall_L(resolve_budget(state.g, p), hp.kappa, hp.mu_h);
    row.overall_L = overall_L;
    row.eta = state.eta;
    row.loss_validity = loss_validity(state.eta, overall_L, hp.eps());
    row.psd_ok = all_certified(lipschitz_verdicts(state.v, state.g, state.m, hp));
    result.history.push_back(row);
    result.epochs_run = epoch;
    if (observer) {
      observer(row);
    }

    const double margin = loss_validity(row.eta_star, overall_L, hp.eps());
    const bool better = !have_best || (row.psd_ok && !best_psd) ||
                        (row.psd_ok == best_psd && margin < best_margin);
    if (better) {
      have_best = true;
      best_psd = row.psd_ok;
      best_margin = margin;
      result.v = state.v;
      result.g = state.g;
      result.multipliers = state.m;
      result.eta = state.eta;
      result.best_epoch = epoch;
    }
    if (row.psd_ok && margin <= 0.0) {
      result.converged = true;
      break;
    }
  }
  return result;
}

double KlEnvelope::beta(double s, double t) const {
  return std::pow(2.0 * k2 * power(s, gamma2) * std::exp(-kappa * t) / k1, 1.0 / gamma1);
}

double KlEnvelope::gamma(double r) const {
  return std::pow(2.0 * kw * power(r, gammaw) / (kappa * k1), 1.0 / gamma1);
}

KlEnvelope kl_envelope(const HyperParams& hp) {
  if (!(hp.kappa > 0.0) || !(hp.k1 > 0.0)) {
    throw ContractViolation("kl_envelope needs kappa > 0 and k1 > 0");
  }
  return {hp.k1, hp.gamma1, hp.k2, hp.gamma2, hp.kw, hp.gammaw, hp.kappa};
}

}  // namespace incstab
