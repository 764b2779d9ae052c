#include "incstab/barrier.hpp"

#include <algorithm>
#include <cmath>

#include "incstab/errors.hpp"

namespace incstab {

BoxBarrier::BoxBarrier(BoxDomain domain, double gain) : domain_(std::move(domain)) {
  if (!(gain > 0.0)) {
    throw ContractViolation("barrier gain must be positive");
  }
  const Vector r = 0.5 * domain_.span();
  scale_ = gain / r.array().square().prod();
  constants_ = compute_constants();
}

double BoxBarrier::value(const Vector& x) const {
  if (x.size() != domain_.lo.size()) {
    throw ContractViolation("barrier input has the wrong length");
  }
  return scale_ * ((x - domain_.lo).array() * (domain_.hi - x).array()).prod();
}

Vector BoxBarrier::gradient(const Vector& x) const {
  const Eigen::Index n = domain_.lo.size();
  if (x.size() != n) {
    throw ContractViolation("barrier input has the wrong length");
  }
  const Vector q = ((x - domain_.lo).array() * (domain_.hi - x).array()).matrix();
  const Vector dq = (domain_.lo + domain_.hi - 2.0 * x);
  Vector g(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double rest = 1.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) rest *= q[j];
    }
    g[i] = scale_ * dq[i] * rest;
  }
  return g;
}

Matrix BoxBarrier::hessian(const Vector& x) const {
  const Eigen::Index n = domain_.lo.size();
  const Vector q = ((x - domain_.lo).array() * (domain_.hi - x).array()).matrix();
  const Vector dq = (domain_.lo + domain_.hi - 2.0 * x);
  Matrix H(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < n; ++k) {
      double rest = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j != i && j != k) rest *= q[j];
      }
      H(i, k) = scale_ * (i == k ? -2.0 : dq[i] * dq[k]) * rest;
    }
  }
  return H;
}

BarrierConstants BoxBarrier::compute_constants() const {
  const Vector r = 0.5 * domain_.span();
  const auto n = domain_.lo.size();
  BarrierConstants c;
  if (n == 1) {
    c.lh = 2.0 * scale_ * r[0];
    c.ldh = 2.0 * scale_;
  } else if (n == 2) {
    c.lh = 2.0 * scale_ * r[0] * r[1] * std::max(r[0], r[1]);
    c.ldh = scale_ * std::max(2.0 * std::max(r[0] * r[0], r[1] * r[1]), 4.0 * r[0] * r[1]);
  } else {
    // Dense grid, about 2e5 points in total.
    const auto per_axis = static_cast<std::size_t>(
        std::max(5.0, std::floor(std::pow(2e5, 1.0 / static_cast<double>(n)))));
    std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
    Vector x(n);
    double max_grad = 0.0;
    double max_hess = 0.0;
    for (;;) {
      for (Eigen::Index i = 0; i < n; ++i) {
        x[i] = domain_.lo[i] + domain_.span()[i] * static_cast<double>(idx[static_cast<std::size_t>(i)]) /
                                   static_cast<double>(per_axis - 1);
      }
      max_grad = std::max(max_grad, gradient(x).norm());
      Eigen::SelfAdjointEigenSolver<Matrix> eig(hessian(x), Eigen::EigenvaluesOnly);
      max_hess = std::max(max_hess, eig.eigenvalues().cwiseAbs().maxCoeff());
      std::size_t i = idx.size();
      while (i-- > 0) {
        if (++idx[i] < per_axis) break;
        idx[i] = 0;
      }
      if (i == static_cast<std::size_t>(-1)) break;
    }
    c.lh = kBarrierHeadroom * max_grad;
    c.ldh = kBarrierHeadroom * max_hess;
  }
  c.mh = c.lh;
  return c;
}

double barrier_value(const BoxBarrier& b, const Vector& x) { return b.value(x); }
Vector barrier_gradient(const BoxBarrier& b, const Vector& x) { return b.gradient(x); }
BarrierConstants barrier_constants(const BoxBarrier& b) { return b.constants(); }

}  // namespace incstab
