#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "incstab/net.hpp"

namespace testing {

using incstab::FeedforwardNet;
using incstab::Matrix;
using incstab::Vector;

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c,
                            double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

// Net with random weights and biases in [-scale, scale].
inline FeedforwardNet dense_net(std::mt19937_64& rng, std::size_t in,
                                const std::vector<std::size_t>& hidden, std::size_t out,
                                incstab::Activation act, double scale = 1.0) {
  std::vector<Matrix> w;
  std::vector<Vector> b;
  std::size_t prev = in;
  for (std::size_t h : hidden) {
    w.push_back(random_matrix(rng, h, prev, scale));
    b.push_back(random_vector(rng, h, -scale, scale));
    prev = h;
  }
  w.push_back(random_matrix(rng, out, prev, scale));
  b.push_back(random_vector(rng, out, -scale, scale));
  return FeedforwardNet(w, b, std::vector<incstab::Activation>(hidden.size(), act));
}

// Written out directly for one hidden tanh layer, independent of the
// library's forward pass.
inline double one_layer_tanh(const Matrix& w0, const Vector& b0, const Matrix& w1, double b1,
                             const Vector& x) {
  double y = b1;
  for (Eigen::Index k = 0; k < w0.rows(); ++k) {
    double a = b0[k];
    for (Eigen::Index j = 0; j < w0.cols(); ++j) a += w0(k, j) * x[j];
    y += w1(0, k) * std::tanh(a);
  }
  return y;
}

inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x,
                                 double h) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector xp = x;
    Vector xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

// Every parameter of a list of nets, in weight-then-bias order.
inline std::vector<double*> parameters(std::vector<FeedforwardNet*> nets) {
  std::vector<double*> out;
  for (auto* n : nets) {
    for (std::size_t i = 0; i < n->weights().size(); ++i) {
      Matrix& w = n->weight(i);
      for (Eigen::Index k = 0; k < w.size(); ++k) out.push_back(w.data() + k);
      Vector& b = n->bias(i);
      for (Eigen::Index k = 0; k < b.size(); ++k) out.push_back(b.data() + k);
    }
  }
  return out;
}

inline std::vector<double> flatten(const incstab::NetGradients& g) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    out.insert(out.end(), g.weights[i].data(), g.weights[i].data() + g.weights[i].size());
    out.insert(out.end(), g.biases[i].data(), g.biases[i].data() + g.biases[i].size());
  }
  return out;
}

// Central differences of `loss` over every parameter of `nets`.
inline std::vector<double> parameter_fd(std::vector<FeedforwardNet*> nets,
                                        const std::function<double()>& loss, double h) {
  std::vector<double> out;
  for (double* p : parameters(nets)) {
    const double keep = *p;
    *p = keep + h;
    const double fp = loss();
    *p = keep - h;
    const double fm = loss();
    *p = keep;
    out.push_back((fp - fm) / (2.0 * h));
  }
  return out;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(1.0, std::sqrt(den));
}

// Largest |f(a) - f(b)| / |a - b| over random pairs in [lo, hi]^n.
inline double empirical_slope(const std::function<Vector(const Vector&)>& f, Eigen::Index n,
                              std::size_t pairs, std::mt19937_64& rng, double lo = -1.0,
                              double hi = 1.0) {
  double best = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const Vector a = random_vector(rng, n, lo, hi);
    Vector b = a + random_vector(rng, n, -0.2, 0.2);
    if (i % 2 == 0) b = random_vector(rng, n, lo, hi);
    const double d = (a - b).norm();
    if (d < 1e-9) continue;
    best = std::max(best, (f(a) - f(b)).norm() / d);
  }
  return best;
}

}  // namespace testing
