#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace incstab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Hidden-layer nonlinearities. Sigmoid and TanhDerivative (sech^2) only
/// appear as the last hidden layer of derivative networks.
enum class Activation { Tanh, Softplus, ReLU, HardTanh, Sigmoid, TanhDerivative };

struct ActivationTraits {
  double slope_min;
  double slope_max;
  double lipschitz;
  bool smooth;
};

ActivationTraits activation_traits(Activation a);
std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

double activate(Activation a, double x);
double activate_derivative(Activation a, double x);
double activate_second_derivative(Activation a, double x);

/// Fully connected network y = W_N phi(... phi(W_0 x + b_0) ...) + b_N.
/// A network with no hidden layers is the affine map W_0 x + b_0.
class FeedforwardNet {
 public:
  FeedforwardNet() = default;
  FeedforwardNet(std::vector<Matrix> weights, std::vector<Vector> biases,
                 std::vector<Activation> activations);

  /// Uniform initialization in [-s, s] with s = scale / sqrt(fan_in); zero
  /// biases.
  static FeedforwardNet random(std::size_t input_dim,
                               const std::vector<std::size_t>& hidden_widths,
                               std::size_t output_dim, Activation activation,
                               std::mt19937_64& rng, double scale = 0.1);

  std::size_t input_dim() const { return static_cast<std::size_t>(weights_.front().cols()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(weights_.back().rows()); }
  std::size_t num_hidden() const { return activations_.size(); }
  std::size_t total_hidden() const;
  std::vector<std::size_t> hidden_widths() const;
  std::size_t parameter_count() const;

  const std::vector<Matrix>& weights() const { return weights_; }
  const std::vector<Vector>& biases() const { return biases_; }
  const std::vector<Activation>& activations() const { return activations_; }
  Matrix& weight(std::size_t i) { return weights_.at(i); }
  Vector& bias(std::size_t i) { return biases_.at(i); }

  bool is_smooth() const;
  /// Throws unless the net can serve as a CLF: scalar output, smooth
  /// hidden activations.
  void require_clf_role() const;

  bool operator==(const FeedforwardNet& other) const;

 private:
  void validate() const;

  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
  std::vector<Activation> activations_;
};

/// Pre- and post-activation values of every hidden layer.
struct ForwardCache {
  std::vector<Vector> pre;   // a_i = W_i z_i + b_i, i < N
  std::vector<Vector> post;  // z_0 = input, z_{i+1} = phi(a_i)
  Vector output;
};

ForwardCache forward_cached(const FeedforwardNet& net, const Vector& input);
Vector forward(const FeedforwardNet& net, const Vector& input);

/// Gradient of the scalar output w.r.t. the input.
Vector input_gradient(const FeedforwardNet& net, const Vector& input);

/// Accumulator with the same shapes as a network's parameters.
struct NetGradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static NetGradients zeros_like(const FeedforwardNet& net);
  NetGradients& operator+=(const NetGradients& other);
  NetGradients& operator*=(double s);
  double squared_norm() const;
};

/// Reverse-mode pullback of the pair (output, input gradient). Adds
/// d/dparams [output_adjoint . y + gradient_adjoint . dy/dx] into grads and
/// returns the adjoint w.r.t. the input. gradient_adjoint may be empty when
/// only the output is differentiated; otherwise the network must be smooth
/// and scalar-valued.
Vector pullback(const FeedforwardNet& net, const ForwardCache& cache,
                const Vector& output_adjoint, const Vector& gradient_adjoint,
                NetGradients& grads);

/// Componentwise input-constraint bounds.
struct SaturationBox {
  Vector u_min;
  Vector u_max;

  SaturationBox() = default;
  SaturationBox(Vector lo, Vector hi);

  std::size_t dim() const { return static_cast<std::size_t>(u_min.size()); }
  Vector clamp(const Vector& u) const;
};

/// Controller output g(x, w) clamped into the box.
Vector saturated_output(const FeedforwardNet& net, const Vector& x, const Vector& w,
                        const SaturationBox& box);

/// Network whose output bounds the input gradient of `net`: hidden layers
/// are shared, the last hidden activation is replaced by its derivative and
/// the output layer is L * W_0^T ... W_{N-1}^T diag(W_N), with L the product
/// of the Lipschitz constants of hidden activations 1..N-1. Exact for one
/// hidden layer.
FeedforwardNet derivative_network(const FeedforwardNet& net);

/// Lipschitz factor L used by derivative_network.
double derivative_activation_factor(const FeedforwardNet& net);

/// Pulls an adjoint on the derivative network's output weights back onto
/// the original network's weights.
void derivative_last_layer_pullback(const FeedforwardNet& net, const Matrix& last_adjoint,
                                    std::vector<Matrix>& weight_grads);

}  // namespace incstab
