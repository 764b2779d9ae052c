#include "incstab/lipcert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "incstab/errors.hpp"
#include "incstab/hash.hpp"

namespace incstab {

namespace {

struct Layout {
  std::size_t n_in = 0;
  std::size_t hidden = 0;
  std::size_t n_out = 0;
  std::size_t last_width = 0;  // columns of theta_N
  std::vector<std::size_t> hidden_offset;
};

Layout layout_of(const LipSdpProblem& p) {
  if (p.weights.empty()) {
    throw ContractViolation("LipSDP problem needs at least one weight matrix");
  }
  Layout l;
  l.n_in = static_cast<std::size_t>(p.weights.front().cols());
  const std::size_t n_hidden = p.weights.size() - 1;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    const std::size_t expected_cols =
        i == 0 ? l.n_in : static_cast<std::size_t>(p.weights[i - 1].rows());
    if (static_cast<std::size_t>(p.weights[i].cols()) != expected_cols) {
      throw ContractViolation("LipSDP weights are not conformant at layer " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < n_hidden; ++i) {
    l.hidden_offset.push_back(l.hidden);
    l.hidden += static_cast<std::size_t>(p.weights[i].rows());
  }
  l.n_out = static_cast<std::size_t>(p.weights.back().rows());
  l.last_width = static_cast<std::size_t>(p.weights.back().cols());
  if (static_cast<std::size_t>(p.lambda.size()) != l.hidden) {
    throw ContractViolation("Lambda has " + std::to_string(p.lambda.size()) +
                            " entries, network has " + std::to_string(l.hidden) +
                            " hidden neurons");
  }
  return l;
}

// P = [A; B], of size 2h x (n_in + h).
Matrix stacked_map(const LipSdpProblem& p, const Layout& l) {
  const auto h = static_cast<Eigen::Index>(l.hidden);
  const auto n = static_cast<Eigen::Index>(l.n_in);
  Matrix P = Matrix::Zero(2 * h, n + h);
  for (std::size_t i = 0; i + 1 < p.weights.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(l.hidden_offset[i]);
    const auto col = i == 0 ? Eigen::Index{0} : n + static_cast<Eigen::Index>(l.hidden_offset[i - 1]);
    P.block(row, col, p.weights[i].rows(), p.weights[i].cols()) = p.weights[i];
  }
  P.block(h, n, h, h).setIdentity();
  return P;
}

Matrix multiplier_matrix(const LipSdpProblem& p, const Layout& l) {
  const auto h = static_cast<Eigen::Index>(l.hidden);
  const double a = p.slope_min;
  const double b = p.slope_max;
  Matrix S = Matrix::Zero(2 * h, 2 * h);
  for (Eigen::Index k = 0; k < h; ++k) {
    const double lam = p.lambda[k];
    S(k, k) = 2.0 * a * b * lam;
    S(k, h + k) = -(a + b) * lam;
    S(h + k, k) = -(a + b) * lam;
    S(h + k, h + k) = 2.0 * lam;
  }
  return S;
}

Eigen::Index last_hidden_column(const Layout& l) {
  return static_cast<Eigen::Index>(l.n_in + l.hidden - l.last_width);
}

}  // namespace

std::size_t LipSdpProblem::hidden_count() const {
  std::size_t h = 0;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    h += static_cast<std::size_t>(weights[i].rows());
  }
  return h;
}

std::size_t LipSdpProblem::matrix_dim() const {
  if (weights.empty()) {
    return 0;
  }
  return static_cast<std::size_t>(weights.front().cols()) + hidden_count() +
         static_cast<std::size_t>(weights.back().rows());
}

LipSdpProblem make_lipsdp_problem(const FeedforwardNet& net, const Vector& lambda,
                                  double lip_bound) {
  LipSdpProblem p;
  p.weights = net.weights();
  p.lambda = lambda;
  p.lip_bound = lip_bound;
  if (net.num_hidden() > 0) {
    p.slope_min = std::numeric_limits<double>::infinity();
    p.slope_max = -std::numeric_limits<double>::infinity();
    for (auto a : net.activations()) {
      const auto t = activation_traits(a);
      p.slope_min = std::min(p.slope_min, t.slope_min);
      p.slope_max = std::max(p.slope_max, t.slope_max);
    }
  }
  return p;
}

Matrix build_lipsdp_matrix(const LipSdpProblem& p) {
  const Layout l = layout_of(p);
  if ((p.lambda.array() < 0.0).any()) {
    throw ContractViolation("Lambda entries must be nonnegative");
  }
  const auto n = static_cast<Eigen::Index>(l.n_in);
  const auto h = static_cast<Eigen::Index>(l.hidden);
  const auto m = static_cast<Eigen::Index>(l.n_out);
  Matrix M = Matrix::Zero(n + h + m, n + h + m);
  if (h > 0) {
    const Matrix P = stacked_map(p, l);
    M.topLeftCorner(n + h, n + h) = P.transpose() * multiplier_matrix(p, l) * P;
  }
  M.topLeftCorner(n, n).diagonal().array() += p.lip_bound * p.lip_bound;
  const Eigen::Index zc = last_hidden_column(l);
  const auto w = static_cast<Eigen::Index>(l.last_width);
  M.block(n + h, zc, m, w) -= p.weights.back();
  M.block(zc, n + h, w, m) -= p.weights.back().transpose();
  M.bottomRightCorner(m, m).diagonal().array() += 1.0;
  // Symmetrize away round-off from the triple product.
  M = 0.5 * (M + M.transpose()).eval();
  return M;
}

PivotReport factor_pivots(const Matrix& m) {
  PivotReport r;
  if (m.rows() != m.cols()) {
    throw ContractViolation("pivot check needs a square matrix");
  }
  if (m.size() == 0) {
    r.psd = r.positive_definite = true;
    return r;
  }
  if (!m.allFinite()) {
    r.min_pivot = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  Eigen::LDLT<Matrix> ldlt(m);
  const Vector d = ldlt.vectorD();
  Eigen::Index arg = 0;
  r.min_pivot = d.minCoeff(&arg);
  r.min_pivot_index = static_cast<std::size_t>(arg);
  r.psd = r.min_pivot >= -kPivotTolerance;
  r.positive_definite = r.min_pivot > 0.0;
  return r;
}

double logdet_psd(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw ContractViolation("logdet needs a square matrix");
  }
  if (!m.allFinite()) {
    throw NotPositiveDefiniteError(0, std::numeric_limits<double>::quiet_NaN());
  }
  Eigen::LDLT<Matrix> ldlt(m);
  const Vector d = ldlt.vectorD();
  double total = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d[i] > 0.0)) {
      throw NotPositiveDefiniteError(static_cast<std::size_t>(i), d[i]);
    }
    total += std::log(d[i]);
  }
  return total;
}

LipschitzVerdict certify_network_lipschitz(const FeedforwardNet& net, double lip_bound,
                                           const Vector& lambda, const std::string& name) {
  LipschitzVerdict v;
  v.bound_name = name;
  v.bound = lip_bound;
  v.lambda_hash = hash_vector(lambda);
  const LipSdpProblem p = make_lipsdp_problem(net, lambda, lip_bound);
  if (static_cast<std::size_t>(lambda.size()) != p.hidden_count() ||
      (lambda.array() < 0.0).any() || !(lip_bound >= 0.0)) {
    v.certified = false;
    v.min_pivot = std::numeric_limits<double>::quiet_NaN();
    return v;
  }
  const PivotReport r = factor_pivots(build_lipsdp_matrix(p));
  v.certified = r.psd;
  v.min_pivot = r.min_pivot;
  v.min_pivot_index = r.min_pivot_index;
  return v;
}

LipschitzVerdict certify_gradient_lipschitz(const FeedforwardNet& net, double lip_bound,
                                            const Vector& lambda, const std::string& name) {
  return certify_network_lipschitz(derivative_network(net), lip_bound, lambda, name);
}

LogdetPenalty logdet_penalty(const LipSdpProblem& p) {
  const Layout l = layout_of(p);
  const Matrix M = build_lipsdp_matrix(p);
  const auto n = static_cast<Eigen::Index>(l.n_in);
  const auto h = static_cast<Eigen::Index>(l.hidden);
  const auto m = static_cast<Eigen::Index>(l.n_out);

  LogdetPenalty out;
  // grad_m holds d value / d M for a symmetric perturbation of M.
  Matrix grad_m;
  Eigen::LDLT<Matrix> ldlt(M);
  const Vector d = ldlt.vectorD();
  if (M.allFinite() && (d.array() > 0.0).all()) {
    out.positive_definite = true;
    out.value = -d.array().log().sum();
    grad_m = -ldlt.solve(Matrix::Identity(M.rows(), M.cols()));
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
    const double lam_min = eig.eigenvalues()[0];
    const Vector v = eig.eigenvectors().col(0);
    out.value = kInfeasiblePenalty - kInfeasibleSlope * lam_min;
    grad_m = -kInfeasibleSlope * v * v.transpose();
  }
  grad_m = 0.5 * (grad_m + grad_m.transpose()).eval();

  out.weight_grads.resize(p.weights.size());
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    out.weight_grads[i] = Matrix::Zero(p.weights[i].rows(), p.weights[i].cols());
  }
  out.lambda_grad = Vector::Zero(h);

  const Eigen::Index zc = last_hidden_column(l);
  const auto w = static_cast<Eigen::Index>(l.last_width);
  out.weight_grads.back() = -2.0 * grad_m.block(n + h, zc, m, w);

  if (h > 0) {
    const Matrix P = stacked_map(p, l);
    const Matrix S = multiplier_matrix(p, l);
    const Matrix G11 = grad_m.topLeftCorner(n + h, n + h);
    const Matrix grad_p = 2.0 * S * P * G11;
    for (std::size_t i = 0; i + 1 < p.weights.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(l.hidden_offset[i]);
      const auto col =
          i == 0 ? Eigen::Index{0} : n + static_cast<Eigen::Index>(l.hidden_offset[i - 1]);
      out.weight_grads[i] = grad_p.block(row, col, p.weights[i].rows(), p.weights[i].cols());
    }
    const Matrix R = P * G11 * P.transpose();
    const double a = p.slope_min;
    const double b = p.slope_max;
    for (Eigen::Index k = 0; k < h; ++k) {
      out.lambda_grad[k] =
          2.0 * a * b * R(k, k) - 2.0 * (a + b) * R(k, h + k) + 2.0 * R(h + k, h + k);
    }
  }
  return out;
}

LogdetPenalty derivative_logdet_penalty(const FeedforwardNet& net, const Vector& lambda,
                                        double lip_bound) {
  const FeedforwardNet dnet = derivative_network(net);
  LogdetPenalty inner = logdet_penalty(make_lipsdp_problem(dnet, lambda, lip_bound));
  LogdetPenalty out;
  out.value = inner.value;
  out.positive_definite = inner.positive_definite;
  out.lambda_grad = inner.lambda_grad;
  const std::size_t n_hidden = net.num_hidden();
  for (const auto& w : net.weights()) {
    out.weight_grads.push_back(Matrix::Zero(w.rows(), w.cols()));
  }
  if (n_hidden == 0) {
    return out;
  }
  for (std::size_t i = 0; i < n_hidden; ++i) {
    out.weight_grads[i] += inner.weight_grads[i];
  }
  derivative_last_layer_pullback(net, inner.weight_grads[n_hidden], out.weight_grads);
  return out;
}

namespace {

// Profile log-likelihood with the scale eliminated; t holds (mu - y_i) in
// units of the sample spread.
double profile_loglik(const std::vector<double>& t, double k, double* scale_pow) {
  const double n = static_cast<double>(t.size());
  double s = 0.0;
  double logs = 0.0;
  for (double v : t) {
    s += std::pow(v, k);
    logs += std::log(v);
  }
  s /= n;
  if (scale_pow != nullptr) {
    *scale_pow = s;
  }
  return n * std::log(k) - n * std::log(s) + (k - 1.0) * logs - n;
}

}  // namespace

WeibullFit fit_reverse_weibull(const std::vector<double>& maxima, std::size_t grid) {
  WeibullFit fit;
  if (maxima.empty()) {
    return fit;
  }
  grid = std::max<std::size_t>(grid, 5);
  const double y_max = *std::max_element(maxima.begin(), maxima.end());
  const double y_min = *std::min_element(maxima.begin(), maxima.end());
  const double spread = y_max - y_min;
  if (!std::isfinite(y_max) || !std::isfinite(y_min)) {
    return fit;
  }
  if (spread <= 1e-9 * std::abs(y_max) || spread == 0.0) {
    fit.location = y_max * (1.0 + 1e-9);
    fit.ok = true;
    return fit;
  }

  constexpr double kDeltaLo = 1e-6;
  constexpr double kDeltaHi = 10.0;
  constexpr double kShapeLo = 1.0;
  constexpr double kShapeHi = 50.0;
  double ld_lo = std::log(kDeltaLo);
  double ld_hi = std::log(kDeltaHi);
  double lk_lo = std::log(kShapeLo);
  double lk_hi = std::log(kShapeHi);

  std::vector<double> t(maxima.size());
  double best_ll = -std::numeric_limits<double>::infinity();
  double best_ld = ld_lo;
  double best_lk = lk_lo;
  for (int round = 0; round < 5; ++round) {
    const double step_d = (ld_hi - ld_lo) / static_cast<double>(grid - 1);
    const double step_k = (lk_hi - lk_lo) / static_cast<double>(grid - 1);
    for (std::size_t i = 0; i < grid; ++i) {
      const double ld = ld_lo + step_d * static_cast<double>(i);
      const double delta = std::exp(ld);
      for (std::size_t j = 0; j < maxima.size(); ++j) {
        t[j] = (y_max - maxima[j]) / spread + delta;
      }
      for (std::size_t j = 0; j < grid; ++j) {
        const double lk = lk_lo + step_k * static_cast<double>(j);
        const double ll = profile_loglik(t, std::exp(lk), nullptr);
        if (ll > best_ll) {
          best_ll = ll;
          best_ld = ld;
          best_lk = lk;
        }
      }
    }
    ld_lo = std::max(std::log(kDeltaLo), best_ld - 2.0 * step_d);
    ld_hi = std::min(std::log(kDeltaHi), best_ld + 2.0 * step_d);
    lk_lo = std::max(std::log(kShapeLo), best_lk - 2.0 * step_k);
    lk_hi = std::min(std::log(kShapeHi), best_lk + 2.0 * step_k);
  }
  if (!std::isfinite(best_ll)) {
    return fit;
  }
  const double delta = std::exp(best_ld);
  const double shape = std::exp(best_lk);
  for (std::size_t j = 0; j < maxima.size(); ++j) {
    t[j] = (y_max - maxima[j]) / spread + delta;
  }
  double scale_pow = 0.0;
  fit.log_likelihood = profile_loglik(t, shape, &scale_pow);
  fit.location = y_max + delta * spread;
  fit.shape = shape;
  fit.scale = std::pow(scale_pow, 1.0 / shape) * spread;
  // A location pinned at the upper search edge means the maxima show no
  // finite endpoint; treat that as a failed fit.
  fit.ok = best_ld < std::log(kDeltaHi) - 1e-9;
  return fit;
}

LipschitzEstimate estimate_lipschitz_black_box(const Oracle& query, const BoxDomain& domain,
                                               const WeibullFitConfig& cfg, std::uint64_t seed) {
  if (cfg.n_batches == 0 || cfg.pairs_per_batch == 0 || cfg.fit_grid == 0) {
    throw ContractViolation("Weibull configuration counts must be at least 1");
  }
  if (!(cfg.pair_radius > 0.0)) {
    throw ContractViolation("pair_radius must be positive");
  }
  const auto dim = static_cast<Eigen::Index>(domain.dim());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto draw_point = [&]() {
    Vector a(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      a[i] = domain.lo[i] + (domain.hi[i] - domain.lo[i]) * unit(rng);
    }
    return a;
  };

  LipschitzEstimate est;
  for (std::size_t b = 0; b < cfg.n_batches; ++b) {
    double batch_max = 0.0;
    for (std::size_t k = 0; k < cfg.pairs_per_batch; ++k) {
      Vector a;
      Vector c;
      for (std::size_t attempt = 0;; ++attempt) {
        if (attempt > 1'000'000) {
          throw DomainError("cannot draw a pair inside the domain with the given pair_radius");
        }
        a = draw_point();
        Vector dir(dim);
        for (Eigen::Index i = 0; i < dim; ++i) {
          dir[i] = normal(rng);
        }
        const double norm = dir.norm();
        if (norm == 0.0) {
          continue;
        }
        c = a + (cfg.pair_radius * (1.0 - unit(rng)) / norm) * dir;
        if (domain.contains(c) && (c - a).norm() >= 1e-12) {
          break;
        }
      }
      const double slope = (query(a) - query(c)).norm() / (a - c).norm();
      if (std::isfinite(slope)) {
        batch_max = std::max(batch_max, slope);
      }
    }
    est.batch_maxima.push_back(batch_max);
  }
  est.raw_max = *std::max_element(est.batch_maxima.begin(), est.batch_maxima.end());
  est.fit = fit_reverse_weibull(est.batch_maxima, cfg.fit_grid);
  if (est.fit.ok) {
    est.value = std::max(est.fit.location, est.raw_max);
  } else {
    est.fallback = true;
    est.value = 1.1 * est.raw_max;
  }
  return est;
}

}  // namespace incstab
