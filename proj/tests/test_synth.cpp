#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "incstab/errors.hpp"
#include "incstab/synth.hpp"
#include "support.hpp"

using namespace incstab;
using testing::dense_net;

namespace {

LipschitzBudget example_budget() {
  LipschitzBudget b;
  b.lip_L = 1;
  b.sl1 = 0.1;
  b.sl2 = 0.1;
  b.slu = 0.05;
  b.mf = 1;
  b.lip_dL = 1;
  b.ml = 1;
  b.lx = 1;
  b.lu = 0.1;
  b.lip_C = 2;
  b.mh = 1;
  b.ldh = 1;
  b.lh = 1;
  return b;
}

HyperParams small_hp() {
  HyperParams hp;
  hp.eps_x = 0.2;
  hp.eps_w = 0.05;
  hp.kappa = 0.5;
  hp.mu_h = 0.3;
  hp.k1 = 0.01;
  hp.k2 = 1.5;
  hp.kw = 0.1;
  hp.epochs = 3;
  hp.batch_size = 32;
  hp.n_batches = 2;
  return hp;
}

Problem toy_problem(const HyperParams& hp) {
  return make_problem(benchmarks::linear_toy(), hp, 1.0, 1.0);
}

struct Nets {
  FeedforwardNet v;
  FeedforwardNet g;
};

Nets toy_nets(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {dense_net(rng, 2, {5}, 1, Activation::Softplus, 0.5),
          dense_net(rng, 2, {4}, 1, Activation::ReLU, 0.5)};
}

// Residuals written out directly with finite-difference gradients.
ResidualBundle oracle_residuals(const Nets& n, const Problem& p, const PairBatch& batch) {
  const HyperParams& hp = p.hp;
  std::vector<double> ra, rb, rc, rd;
  for (const auto& t : batch) {
    const Vector xq = p.xs.points[t.xq];
    const Vector xr = p.xs.points[t.xr];
    const Vector wq = p.ws.points[t.wq];
    const Vector wr = p.ws.points[t.wr];
    Vector z(2);
    z << xq[0], xr[0];
    const double v = forward(n.v, z)[0];
    const Vector grad = testing::central_difference(
        [&](const Vector& s) { return forward(n.v, s)[0]; }, z, 1e-6);
    auto field = [&](const Vector& x, const Vector& w) {
      Vector in(2);
      in << x[0], w[0];
      const double u = std::clamp(forward(n.g, in)[0], -1.0, 1.0);
      return -x[0] + u;
    };
    const double d = std::abs(xq[0] - xr[0]);
    if (!t.flagged) {
      ra.push_back(-v + hp.k1 * d);
      rb.push_back(v - hp.k2 * d);
    }
    rc.push_back(grad[0] * field(xq, wq) + grad[1] * field(xr, wr) + hp.kappa * v -
                 hp.kw * std::abs(wq[0] - wr[0]));
    const double h = p.barrier.scale() * (xq[0] + 1.0) * (1.0 - xq[0]);
    const double dh = p.barrier.scale() * (-2.0 * xq[0]);
    rd.push_back(-dh * field(xq, wq) - hp.mu_h * h);
  }
  auto vec = [](const std::vector<double>& s) {
    return Vector(Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size())));
  };
  return {vec(ra), vec(rb), vec(rc), vec(rd)};
}

}  // namespace

TEST_CASE("composite Lipschitz constant") {
  const LipschitzBudget b = example_budget();
  const double t3 = std::sqrt(2.0) * 0.5 + 0.1 + 2 * (1 + 1 * (1 + std::sqrt(2.0) * 0.1 * 2));
  CHECK(t3 == doctest::Approx(5.3728).epsilon(1e-4));
  CHECK(compose_overall_L(b, 0.5, 0.1) == doctest::Approx(t3));

  LipschitzBudget z;
  z.lx = z.lu = z.lip_dL = z.lip_C = z.sl1 = z.sl2 = z.slu = z.lh = z.ldh = z.mh = z.ml = z.mf = 0;
  z.lip_L = 1;
  CHECK(compose_overall_L(z, 0, 0) == doctest::Approx(std::sqrt(2.0)));

  LipschitzBudget missing = b;
  missing.mf.reset();
  try {
    compose_overall_L(missing, 0.5, 0.1);
    FAIL("expected IncompleteBudgetError");
  } catch (const IncompleteBudgetError& e) {
    CHECK(e.missing == "M_f");
  }

  // Monotone in every component.
  std::optional<double> LipschitzBudget::*fields[] = {
      &LipschitzBudget::lx,  &LipschitzBudget::lu,    &LipschitzBudget::lip_L,
      &LipschitzBudget::lip_dL, &LipschitzBudget::lip_C, &LipschitzBudget::sl1,
      &LipschitzBudget::sl2, &LipschitzBudget::slu,   &LipschitzBudget::lh,
      &LipschitzBudget::ldh, &LipschitzBudget::mh,    &LipschitzBudget::ml,
      &LipschitzBudget::mf};
  const double base = compose_overall_L(b, 0.5, 0.1);
  for (auto f : fields) {
    LipschitzBudget up = b;
    up.*f = *(b.*f) + 0.3;
    CHECK(compose_overall_L(up, 0.5, 0.1) >= base);
  }
  CHECK(class_k_lipschitz(2.0, 3.0, 0.5) == doctest::Approx(1.5));
}

TEST_CASE("validity arithmetic") {
  CHECK(loss_validity(-0.0065, 3.9555, 0.0016) == doctest::Approx(-0.00017).epsilon(0.02));
  CHECK(loss_validity(-0.0806, 7.6689, 0.0105) == doctest::Approx(-0.000076).epsilon(0.05));
  CHECK(loss_validity(-0.3, 7.0, 0.0) == -0.3);
}

TEST_CASE("hinge loss") {
  HyperParams hp;
  hp.c = {2, 2, 2, 2};
  ResidualBundle r{Vector::Constant(3, -1.0), Vector::Constant(1, -0.5), Vector::Zero(0),
                   Vector::Constant(2, -0.2)};
  CHECK(loss_main(r, 0.0, hp) == 0.0);
  ResidualBundle one{Vector::Constant(1, 1.25), Vector::Zero(0), Vector::Zero(0),
                     Vector::Zero(0)};
  CHECK(loss_main(one, 0.25, hp) == doctest::Approx(2.0));
}

TEST_CASE("residuals against a direct evaluation") {
  const HyperParams hp = small_hp();
  const Problem p = toy_problem(hp);
  const Nets n = toy_nets(60);
  const auto batches = make_pair_batches(p.xs, p.ws, 40, 1, hp.pair_exclusion(), 1);
  const ResidualBundle got = scp_residuals(n.v, n.g, p, batches[0]);
  const ResidualBundle want = oracle_residuals(n, p, batches[0]);
  REQUIRE(got.ra.size() == want.ra.size());
  CHECK((got.ra - want.ra).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((got.rb - want.rb).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((got.rc - want.rc).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((got.rd - want.rd).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("coincident pairs and the zero CLF") {
  HyperParams hp = small_hp();
  hp.k1 = 1e-300;
  const Problem p = toy_problem(hp);
  Nets n = toy_nets(61);
  const PairBatch same{{3, 3, 1, 1, false}};
  const ResidualBundle r = scp_residuals(n.v, n.g, p, same);
  const Vector& x = p.xs.points[3];
  Vector z(2);
  z << x[0], x[0];
  const Vector grad = input_gradient(n.v, z);
  const double f = eval_dynamics(p.sys, x, saturated_output(n.g, x, p.ws.points[1], p.box))[0];
  CHECK(r.rc[0] == doctest::Approx((grad[0] + grad[1]) * f + hp.kappa * forward(n.v, z)[0]));

  FeedforwardNet zero({Matrix::Zero(3, 2), Matrix::Zero(1, 3)}, {Vector::Zero(3), Vector::Zero(1)},
                      {Activation::Tanh});
  hp.k1 = 0.0;
  Problem pz = p;
  pz.hp = hp;
  const auto batches = make_pair_batches(p.xs, p.ws, 30, 1, hp.pair_exclusion(), 2);
  CHECK(scp_residuals(zero, n.g, pz, batches[0]).ra.cwiseAbs().maxCoeff() == 0.0);

  const auto flagged = make_pair_batches(p.xs, p.ws, 30, 1, 100.0, 2);
  HyperParams far = hp;
  far.d_min = 100.0;
  Problem pf = p;
  pf.hp = far;
  const ResidualBundle rf = scp_residuals(n.v, n.g, pf, flagged[0]);
  CHECK(rf.ra.size() == 0);
  CHECK(loss_main(rf, 1e9, far) == 0.0);
}

TEST_CASE("full-dataset maxima equal a brute-force scan") {
  const HyperParams hp = small_hp();
  const Problem p = toy_problem(hp);
  const Nets n = toy_nets(62);
  PairBatch all;
  for (std::size_t q = 0; q < p.xs.size(); ++q)
    for (std::size_t r = 0; r < p.xs.size(); ++r)
      for (std::size_t j = 0; j < p.ws.size(); ++j)
        for (std::size_t l = 0; l < p.ws.size(); ++l) {
          const double d = (p.xs.points[q] - p.xs.points[r]).norm();
          all.push_back({q, r, j, l, d < hp.pair_exclusion()});
        }
  const ResidualBundle r = scp_residuals(n.v, n.g, p, all);
  const ResidualMaxima m = full_dataset_residuals(n.v, n.g, p);
  CHECK(m.a == r.ra.maxCoeff());
  CHECK(m.b == r.rb.maxCoeff());
  CHECK(m.c == doctest::Approx(r.rc.maxCoeff()).epsilon(1e-14));
  CHECK(m.d == r.rd.maxCoeff());

  const auto batches = make_pair_batches(p.xs, p.ws, 50, 4, hp.pair_exclusion(), 3);
  for (const auto& b : batches) {
    const ResidualBundle rb = scp_residuals(n.v, n.g, p, b);
    CHECK(rb.rc.maxCoeff() <= m.c + 1e-15);
    CHECK(rb.rd.maxCoeff() <= m.d);
  }
}

TEST_CASE("batch loss gradient matches finite differences") {
  HyperParams hp = small_hp();
  hp.cl = {0.01, 0.02, 0.03};
  hp.cv = 0.7;
  const Problem p = toy_problem(hp);
  Nets n = toy_nets(63);
  std::mt19937_64 rng(64);
  Multipliers m = Multipliers::ones_for(n.v, n.g);
  m.clf = testing::random_vector(rng, m.clf.size(), 0.5, 1.5);
  const double eta = -0.01;
  const double L = 3.0;
  const auto batch = make_pair_batches(p.xs, p.ws, 24, 1, hp.pair_exclusion(), 4)[0];

  const LossGradients lg = batch_loss_gradients(n.v, n.g, m, eta, L, p, batch);
  CHECK(lg.loss_main == doctest::Approx(loss_main(scp_residuals(n.v, n.g, p, batch), eta, hp)));
  CHECK(lg.loss_lipschitz == doctest::Approx(loss_lipschitz(n.v, n.g, m, hp)));
  CHECK(lg.loss_validity == doctest::Approx(hp.cv * (L * hp.eps() + eta)));

  auto total = [&] {
    return loss_main(scp_residuals(n.v, n.g, p, batch), eta, hp) +
           loss_lipschitz(n.v, n.g, m, hp);
  };
  // The controller only reaches the loss through the plant's finite-difference
  // Jacobian, so its tolerance is looser.
  const auto fd_v = testing::parameter_fd({&n.v}, total, 1e-6);
  CHECK(testing::relative_error(testing::flatten(lg.v), fd_v) <= 1e-4);
  const auto fd_g = testing::parameter_fd({&n.g}, total, 1e-6);
  CHECK(testing::relative_error(testing::flatten(lg.g), fd_g) <= 1e-4);

  for (Eigen::Index k = 0; k < m.clf.size(); ++k) {
    Multipliers mp = m;
    mp.clf[k] += 1e-6;
    Multipliers mm = m;
    mm.clf[k] -= 1e-6;
    const double fd =
        (loss_lipschitz(n.v, n.g, mp, hp) - loss_lipschitz(n.v, n.g, mm, hp)) / 2e-6;
    CHECK(lg.multipliers.clf[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("Lipschitz loss") {
  HyperParams hp = small_hp();
  const Nets n = toy_nets(65);
  std::mt19937_64 rng(66);
  FeedforwardNet v = FeedforwardNet::random(2, {10}, 1, Activation::Tanh, rng, 0.1);
  FeedforwardNet g = FeedforwardNet::random(2, {8}, 1, Activation::ReLU, rng, 0.1);
  const Multipliers m = Multipliers::ones_for(v, g);
  const double fresh = loss_lipschitz(v, g, m, hp);
  CHECK(std::isfinite(fresh));
  CHECK(fresh < kInfeasiblePenalty * 1e-3);

  FeedforwardNet steep = v;
  steep.weight(0) *= 100.0;
  steep.weight(1) *= 100.0;
  CHECK(loss_lipschitz(steep, g, m, hp) >= hp.cl[0] * kInfeasiblePenalty);

  hp.cl = {0, 0, 0};
  CHECK(loss_lipschitz(steep, g, m, hp) == 0.0);
}

TEST_CASE("verdict logic") {
  Certificate c;
  c.eta_star = 0.001;
  c.overall_L = 0.5;
  c.eps = 0.001;
  for (auto& v : c.lipschitz) v.certified = true;
  finalize_verdict(c);
  CHECK(c.margin == doctest::Approx(0.0015));
  CHECK_FALSE(c.certified);

  c.eta_star = -0.01;
  finalize_verdict(c);
  CHECK(c.certified);
  c.lipschitz[1].certified = false;
  finalize_verdict(c);
  CHECK_FALSE(c.certified);

  const auto j = c.to_json();
  CHECK(j.at("verdict") == "not-certified");
  CHECK(j.at("lipschitz").size() == 3);
}

TEST_CASE("KL envelope") {
  HyperParams hp;
  hp.k1 = hp.k2 = 1;
  hp.gamma1 = hp.gamma2 = 2;
  hp.kappa = 0.3;
  const KlEnvelope e = kl_envelope(hp);
  CHECK(e.beta(0.7, 0.0) == doctest::Approx(std::sqrt(2.0) * 0.7));
  CHECK(e.beta(0.0, 3.0) == 0.0);
  CHECK(e.gamma(0.0) == 0.0);
  double prev = e.beta(1.0, 0.0);
  for (double t : {1.0, 10.0, 100.0}) {
    CHECK(e.beta(1.0, t) < prev);
    prev = e.beta(1.0, t);
  }
  CHECK(prev < 1e-6);
  CHECK(e.gamma(0.2) < e.gamma(0.4));
}

TEST_CASE("training with no epochs returns the initial networks") {
  HyperParams hp = small_hp();
  hp.epochs = 0;
  const Problem p = toy_problem(hp);
  const TrainResult r = train(p, Architecture{{5}, Activation::Softplus, {3}, Activation::ReLU}, 3);
  CHECK_FALSE(r.converged);
  CHECK(r.history.empty());
  std::mt19937_64 rng(3);
  CHECK(r.v == FeedforwardNet::random(2, {5}, 1, Activation::Softplus, rng, hp.init_scale));
}

TEST_CASE("training is deterministic") {
  const HyperParams hp = small_hp();
  const Problem p = toy_problem(hp);
  const Architecture arch{{5}, Activation::Softplus, {3}, Activation::ReLU};
  const TrainResult a = train(p, arch, 8);
  const TrainResult b = train(p, arch, 8);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss_main == b.history[i].loss_main);
    CHECK(a.history[i].eta_star == b.history[i].eta_star);
  }
  CHECK(a.v == b.v);
}

TEST_CASE("multiplier file round-trip") {
  std::mt19937_64 rng(67);
  Multipliers m{testing::random_vector(rng, 4), testing::random_vector(rng, 4),
                testing::random_vector(rng, 2)};
  const auto path = std::filesystem::temp_directory_path() / "incstab_multipliers_test.txt";
  save_multipliers(path, m);
  const Multipliers r = load_multipliers(path);
  CHECK(r.clf == m.clf);
  CHECK(r.clf_derivative == m.clf_derivative);
  CHECK(r.controller == m.controller);
  std::filesystem::remove(path);
}
