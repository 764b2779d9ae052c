#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "incstab/net.hpp"
#include "incstab/sampling.hpp"

namespace incstab {

struct LipSdpProblem {
  std::vector<Matrix> weights;  // theta_0 ... theta_N
  Vector lambda;                // diagonal of Lambda, one entry per hidden neuron
  double slope_min = 0.0;
  double slope_max = 1.0;
  double lip_bound = 1.0;

  std::size_t hidden_count() const;
  std::size_t matrix_dim() const;
};

/// Slopes come from the activation table; mixed layers use the loosest
/// enclosing interval.
LipSdpProblem make_lipsdp_problem(const FeedforwardNet& net, const Vector& lambda,
                                  double lip_bound);

/// [A;B]^T S [A;B] plus the bound and output blocks. Index layout is
/// [x | z_1 ... z_N | y].
Matrix build_lipsdp_matrix(const LipSdpProblem& p);

struct PivotReport {
  bool psd = false;                // all pivots >= -1e-12
  bool positive_definite = false;  // all pivots > 0
  double min_pivot = 0.0;
  std::size_t min_pivot_index = 0;
};

inline constexpr double kPivotTolerance = 1e-12;

PivotReport factor_pivots(const Matrix& m);

/// Log-determinant through a pivoted LDL^T factorization. Throws
/// NotPositiveDefiniteError on the first pivot <= 0.
double logdet_psd(const Matrix& m);

struct LipschitzVerdict {
  std::string bound_name;
  double bound = 0.0;
  bool certified = false;
  double min_pivot = 0.0;
  std::size_t min_pivot_index = 0;
  std::string lambda_hash;
};

LipschitzVerdict certify_network_lipschitz(const FeedforwardNet& net, double lip_bound,
                                           const Vector& lambda,
                                           const std::string& name = "L");

/// Certifies the gradient Lipschitz bound through the derivative network.
LipschitzVerdict certify_gradient_lipschitz(const FeedforwardNet& net, double lip_bound,
                                            const Vector& lambda,
                                            const std::string& name = "dL");

/// Smooth training surrogate for -log det M. Inside the PD cone it is
/// exactly -log det; outside it is kInfeasiblePenalty - kInfeasibleSlope *
/// lambda_min(M), which keeps a gradient that pushes back into the cone.
struct LogdetPenalty {
  double value = 0.0;
  bool positive_definite = false;
  std::vector<Matrix> weight_grads;  // d value / d theta_i
  Vector lambda_grad;                // d value / d Lambda_kk
};

inline constexpr double kInfeasiblePenalty = 1e4;
inline constexpr double kInfeasibleSlope = 1e4;

LogdetPenalty logdet_penalty(const LipSdpProblem& p);

/// Penalty for the derivative network of `net` with gradients mapped back
/// onto the weights of `net` itself.
LogdetPenalty derivative_logdet_penalty(const FeedforwardNet& net, const Vector& lambda,
                                        double lip_bound);

struct WeibullFitConfig {
  std::size_t n_batches = 30;
  std::size_t pairs_per_batch = 1000;
  double pair_radius = 0.1;
  std::size_t fit_grid = 40;
};

struct WeibullFit {
  double location = 0.0;
  double scale = 0.0;
  double shape = 0.0;
  double log_likelihood = 0.0;
  bool ok = false;
};

/// Maximum-likelihood three-parameter reverse Weibull fit to sample maxima,
/// with the scale profiled out and a coarse-to-fine grid over location and
/// shape.
WeibullFit fit_reverse_weibull(const std::vector<double>& maxima, std::size_t grid);

struct LipschitzEstimate {
  double value = 0.0;
  double raw_max = 0.0;
  std::vector<double> batch_maxima;
  WeibullFit fit;
  bool fallback = false;  // fit failed, value = 1.1 * raw_max
};

using Oracle = std::function<Vector(const Vector&)>;

LipschitzEstimate estimate_lipschitz_black_box(const Oracle& query, const BoxDomain& domain,
                                               const WeibullFitConfig& cfg, std::uint64_t seed);

}  // namespace incstab
