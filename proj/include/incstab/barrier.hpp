#pragma once

#include "incstab/net.hpp"
#include "incstab/sampling.hpp"

namespace incstab {

struct BarrierConstants {
  double lh = 0.0;   // Lipschitz constant of h
  double ldh = 0.0;  // Lipschitz constant of grad h
  double mh = 0.0;   // bound on |grad h|
};

/// h(x) = scale * prod_i (x_i - lo_i)(hi_i - x_i), zero on the faces and
/// positive inside. With gain 1 the maximum (at the center) is 1.
class BoxBarrier {
 public:
  BoxBarrier() = default;
  explicit BoxBarrier(BoxDomain domain, double gain = 1.0);

  const BoxDomain& domain() const { return domain_; }
  double scale() const { return scale_; }

  double value(const Vector& x) const;
  Vector gradient(const Vector& x) const;
  Matrix hessian(const Vector& x) const;

  /// Closed forms up to two dimensions; above that, dense-grid maxima with
  /// 10% headroom.
  BarrierConstants constants() const { return constants_; }

 private:
  BarrierConstants compute_constants() const;

  BoxDomain domain_;
  double scale_ = 1.0;
  BarrierConstants constants_;
};

inline constexpr double kBarrierHeadroom = 1.1;

double barrier_value(const BoxBarrier& b, const Vector& x);
Vector barrier_gradient(const BoxBarrier& b, const Vector& x);
BarrierConstants barrier_constants(const BoxBarrier& b);

}  // namespace incstab
