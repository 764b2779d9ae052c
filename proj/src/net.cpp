#include "incstab/net.hpp"

#include <algorithm>
#include <cmath>

#include "incstab/errors.hpp"

namespace incstab {

namespace {

constexpr double kTanhDerivativeSlope = 0.76980035891950105;  // 4 / (3 sqrt 3)

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Activation derivative_activation(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return Activation::TanhDerivative;
    case Activation::Softplus:
      return Activation::Sigmoid;
    default:
      throw UnsupportedGradientError("activation '" + std::string(to_string(a)) +
                                     "' has no derivative activation");
  }
}

}  // namespace

ActivationTraits activation_traits(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return {0.0, 1.0, 1.0, true};
    case Activation::Softplus:
      return {0.0, 1.0, 1.0, true};
    case Activation::ReLU:
      return {0.0, 1.0, 1.0, false};
    case Activation::HardTanh:
      return {0.0, 1.0, 1.0, false};
    case Activation::Sigmoid:
      return {0.0, 0.25, 0.25, true};
    case Activation::TanhDerivative:
      return {-kTanhDerivativeSlope, kTanhDerivativeSlope, kTanhDerivativeSlope, true};
  }
  throw ContractViolation("unknown activation");
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return "tanh";
    case Activation::Softplus:
      return "softplus";
    case Activation::ReLU:
      return "relu";
    case Activation::HardTanh:
      return "hardtanh";
    case Activation::Sigmoid:
      return "sigmoid";
    case Activation::TanhDerivative:
      return "tanh_derivative";
  }
  return "?";
}

Activation activation_from_string(std::string_view name) {
  for (auto a : {Activation::Tanh, Activation::Softplus, Activation::ReLU, Activation::HardTanh,
                 Activation::Sigmoid, Activation::TanhDerivative}) {
    if (to_string(a) == name) {
      return a;
    }
  }
  throw ContractViolation("unknown activation '" + std::string(name) + "'");
}

double activate(Activation a, double x) {
  switch (a) {
    case Activation::Tanh:
      return std::tanh(x);
    case Activation::Softplus:
      return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    case Activation::ReLU:
      return x > 0.0 ? x : 0.0;
    case Activation::HardTanh:
      return std::clamp(x, -1.0, 1.0);
    case Activation::Sigmoid:
      return sigmoid(x);
    case Activation::TanhDerivative: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
  }
  return 0.0;
}

double activate_derivative(Activation a, double x) {
  switch (a) {
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::Softplus:
      return sigmoid(x);
    case Activation::ReLU:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::HardTanh:
      return (x > -1.0 && x < 1.0) ? 1.0 : 0.0;
    case Activation::Sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::TanhDerivative: {
      const double t = std::tanh(x);
      return -2.0 * t * (1.0 - t * t);
    }
  }
  return 0.0;
}

double activate_second_derivative(Activation a, double x) {
  switch (a) {
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return -2.0 * t * (1.0 - t * t);
    }
    case Activation::Softplus: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::ReLU:
    case Activation::HardTanh:
      return 0.0;
    case Activation::Sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
    case Activation::TanhDerivative: {
      const double t = std::tanh(x);
      const double s = 1.0 - t * t;
      return -2.0 * s * s + 4.0 * t * t * s;
    }
  }
  return 0.0;
}

FeedforwardNet::FeedforwardNet(std::vector<Matrix> weights, std::vector<Vector> biases,
                               std::vector<Activation> activations)
    : weights_(std::move(weights)),
      biases_(std::move(biases)),
      activations_(std::move(activations)) {
  validate();
}

void FeedforwardNet::validate() const {
  if (weights_.empty()) {
    throw ContractViolation("network needs at least one layer");
  }
  if (biases_.size() != weights_.size() || activations_.size() + 1 != weights_.size()) {
    throw ContractViolation("network layer lists have inconsistent lengths");
  }
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i].rows() == 0 || weights_[i].cols() == 0) {
      throw ContractViolation("layer " + std::to_string(i) + " has an empty weight matrix");
    }
    if (biases_[i].size() != weights_[i].rows()) {
      throw ContractViolation("layer " + std::to_string(i) + " bias length mismatch");
    }
    if (i > 0 && weights_[i].cols() != weights_[i - 1].rows()) {
      throw ContractViolation("layer " + std::to_string(i) + " is not conformant with layer " +
                              std::to_string(i - 1));
    }
  }
}

FeedforwardNet FeedforwardNet::random(std::size_t input_dim,
                                      const std::vector<std::size_t>& hidden_widths,
                                      std::size_t output_dim, Activation activation,
                                      std::mt19937_64& rng, double scale) {
  std::vector<std::size_t> dims;
  dims.push_back(input_dim);
  dims.insert(dims.end(), hidden_widths.begin(), hidden_widths.end());
  dims.push_back(output_dim);

  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double s = scale / std::sqrt(static_cast<double>(dims[i]));
    std::uniform_real_distribution<double> dist(-s, s);
    Matrix w(static_cast<Eigen::Index>(dims[i + 1]), static_cast<Eigen::Index>(dims[i]));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        w(r, c) = dist(rng);
      }
    }
    weights.push_back(std::move(w));
    biases.push_back(Vector::Zero(static_cast<Eigen::Index>(dims[i + 1])));
  }
  return FeedforwardNet(std::move(weights), std::move(biases),
                        std::vector<Activation>(hidden_widths.size(), activation));
}

std::size_t FeedforwardNet::total_hidden() const {
  std::size_t total = 0;
  for (std::size_t i = 0; i < num_hidden(); ++i) {
    total += static_cast<std::size_t>(weights_[i].rows());
  }
  return total;
}

std::vector<std::size_t> FeedforwardNet::hidden_widths() const {
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < num_hidden(); ++i) {
    widths.push_back(static_cast<std::size_t>(weights_[i].rows()));
  }
  return widths;
}

std::size_t FeedforwardNet::parameter_count() const {
  std::size_t count = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    count += static_cast<std::size_t>(weights_[i].size() + biases_[i].size());
  }
  return count;
}

bool FeedforwardNet::is_smooth() const {
  return std::all_of(activations_.begin(), activations_.end(),
                     [](Activation a) { return activation_traits(a).smooth; });
}

void FeedforwardNet::require_clf_role() const {
  if (output_dim() != 1) {
    throw ContractViolation("CLF network must have a scalar output");
  }
  for (auto a : activations_) {
    if (a != Activation::Tanh && a != Activation::Softplus) {
      throw ContractViolation("CLF network needs tanh or softplus activations, got '" +
                              std::string(to_string(a)) + "'");
    }
  }
}

bool FeedforwardNet::operator==(const FeedforwardNet& other) const {
  if (weights_.size() != other.weights_.size() || activations_ != other.activations_) {
    return false;
  }
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i].rows() != other.weights_[i].rows() ||
        weights_[i].cols() != other.weights_[i].cols() || weights_[i] != other.weights_[i] ||
        biases_[i] != other.biases_[i]) {
      return false;
    }
  }
  return true;
}

ForwardCache forward_cached(const FeedforwardNet& net, const Vector& input) {
  if (static_cast<std::size_t>(input.size()) != net.input_dim()) {
    throw ContractViolation("network expects input of length " + std::to_string(net.input_dim()) +
                            ", got " + std::to_string(input.size()));
  }
  const auto& w = net.weights();
  const auto& b = net.biases();
  const auto& act = net.activations();
  const std::size_t n_hidden = net.num_hidden();

  ForwardCache cache;
  cache.pre.reserve(n_hidden);
  cache.post.reserve(n_hidden + 1);
  cache.post.push_back(input);
  for (std::size_t i = 0; i < n_hidden; ++i) {
    Vector a = w[i] * cache.post.back() + b[i];
    Vector z = a.unaryExpr([&](double v) { return activate(act[i], v); });
    cache.pre.push_back(std::move(a));
    cache.post.push_back(std::move(z));
  }
  cache.output = w[n_hidden] * cache.post.back() + b[n_hidden];
  return cache;
}

Vector forward(const FeedforwardNet& net, const Vector& input) {
  return forward_cached(net, input).output;
}

Vector input_gradient(const FeedforwardNet& net, const Vector& input) {
  if (net.output_dim() != 1) {
    throw ContractViolation("input_gradient needs a scalar-output network");
  }
  if (!net.is_smooth()) {
    throw UnsupportedGradientError("input_gradient needs smooth hidden activations");
  }
  const ForwardCache cache = forward_cached(net, input);
  const auto& w = net.weights();
  const auto& act = net.activations();
  Vector delta = w.back().transpose();
  for (std::size_t i = net.num_hidden(); i-- > 0;) {
    const Vector slope = cache.pre[i].unaryExpr([&](double v) { return activate_derivative(act[i], v); });
    delta = w[i].transpose() * slope.cwiseProduct(delta);
  }
  return delta;
}

NetGradients NetGradients::zeros_like(const FeedforwardNet& net) {
  NetGradients g;
  for (std::size_t i = 0; i < net.weights().size(); ++i) {
    g.weights.push_back(Matrix::Zero(net.weights()[i].rows(), net.weights()[i].cols()));
    g.biases.push_back(Vector::Zero(net.biases()[i].size()));
  }
  return g;
}

NetGradients& NetGradients::operator+=(const NetGradients& other) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] += other.weights[i];
    biases[i] += other.biases[i];
  }
  return *this;
}

NetGradients& NetGradients::operator*=(double s) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] *= s;
    biases[i] *= s;
  }
  return *this;
}

double NetGradients::squared_norm() const {
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    total += weights[i].squaredNorm() + biases[i].squaredNorm();
  }
  return total;
}

Vector pullback(const FeedforwardNet& net, const ForwardCache& cache, const Vector& output_adjoint,
                const Vector& gradient_adjoint, NetGradients& grads) {
  const auto& w = net.weights();
  const auto& act = net.activations();
  const std::size_t n_hidden = net.num_hidden();

  std::vector<Vector> pre_adjoint(n_hidden);
  for (std::size_t i = 0; i < n_hidden; ++i) {
    pre_adjoint[i] = Vector::Zero(cache.pre[i].size());
  }

  if (gradient_adjoint.size() > 0) {
    if (net.output_dim() != 1) {
      throw ContractViolation("gradient adjoint needs a scalar-output network");
    }
    if (!net.is_smooth()) {
      throw UnsupportedGradientError("second-order pullback needs smooth hidden activations");
    }
    if (static_cast<std::size_t>(gradient_adjoint.size()) != net.input_dim()) {
      throw ContractViolation("gradient adjoint has the wrong length");
    }
    // Backward sweep of the input gradient: delta_N = W_N^T,
    // s_i = phi'(a_i) * delta_{i+1}, delta_i = W_i^T s_i.
    std::vector<Vector> delta(n_hidden + 1);
    std::vector<Vector> scaled(n_hidden);
    std::vector<Vector> slope(n_hidden);
    delta[n_hidden] = w[n_hidden].transpose();
    for (std::size_t i = n_hidden; i-- > 0;) {
      slope[i] = cache.pre[i].unaryExpr([&](double v) { return activate_derivative(act[i], v); });
      scaled[i] = slope[i].cwiseProduct(delta[i + 1]);
      delta[i] = w[i].transpose() * scaled[i];
    }
    // Reverse of that sweep, from delta_0 outwards.
    Vector delta_adjoint = gradient_adjoint;
    for (std::size_t i = 0; i < n_hidden; ++i) {
      grads.weights[i].noalias() += scaled[i] * delta_adjoint.transpose();
      const Vector scaled_adjoint = w[i] * delta_adjoint;
      const Vector curvature =
          cache.pre[i].unaryExpr([&](double v) { return activate_second_derivative(act[i], v); });
      pre_adjoint[i] += curvature.cwiseProduct(delta[i + 1]).cwiseProduct(scaled_adjoint);
      delta_adjoint = slope[i].cwiseProduct(scaled_adjoint);
    }
    grads.weights[n_hidden].row(0) += delta_adjoint.transpose();
  }

  Vector post_adjoint;
  if (output_adjoint.size() > 0) {
    grads.weights[n_hidden].noalias() += output_adjoint * cache.post[n_hidden].transpose();
    grads.biases[n_hidden] += output_adjoint;
    post_adjoint = w[n_hidden].transpose() * output_adjoint;
  } else {
    post_adjoint = Vector::Zero(cache.post[n_hidden].size());
  }
  for (std::size_t i = n_hidden; i-- > 0;) {
    const Vector slope =
        cache.pre[i].unaryExpr([&](double v) { return activate_derivative(act[i], v); });
    pre_adjoint[i] += slope.cwiseProduct(post_adjoint);
    grads.weights[i].noalias() += pre_adjoint[i] * cache.post[i].transpose();
    grads.biases[i] += pre_adjoint[i];
    post_adjoint = w[i].transpose() * pre_adjoint[i];
  }
  return post_adjoint;
}

SaturationBox::SaturationBox(Vector lo, Vector hi) : u_min(std::move(lo)), u_max(std::move(hi)) {
  if (u_min.size() != u_max.size() || u_min.size() == 0) {
    throw ContractViolation("saturation bounds must be nonempty and of equal length");
  }
  if (!(u_min.array() < u_max.array()).all()) {
    throw ContractViolation("saturation box needs u_min < u_max componentwise");
  }
}

Vector SaturationBox::clamp(const Vector& u) const {
  if (u.size() != u_min.size()) {
    throw ContractViolation("saturation input has the wrong length");
  }
  return u.cwiseMax(u_min).cwiseMin(u_max);
}

Vector saturated_output(const FeedforwardNet& net, const Vector& x, const Vector& w,
                        const SaturationBox& box) {
  if (static_cast<std::size_t>(x.size() + w.size()) != net.input_dim()) {
    throw ContractViolation("controller input [x; w] has the wrong length");
  }
  Vector z(x.size() + w.size());
  z << x, w;
  return box.clamp(forward(net, z));
}

double derivative_activation_factor(const FeedforwardNet& net) {
  double factor = 1.0;
  for (std::size_t i = 0; i + 1 < net.num_hidden(); ++i) {
    factor *= activation_traits(net.activations()[i]).lipschitz;
  }
  return factor;
}

FeedforwardNet derivative_network(const FeedforwardNet& net) {
  if (net.output_dim() != 1) {
    throw ContractViolation("derivative_network needs a scalar-output network");
  }
  const std::size_t n_hidden = net.num_hidden();
  const auto& w = net.weights();
  const Eigen::Index d = static_cast<Eigen::Index>(net.input_dim());

  if (n_hidden == 0) {
    // Affine net: the gradient is the constant W_0^T.
    return FeedforwardNet({Matrix::Zero(d, d)}, {w[0].transpose()}, {});
  }

  std::vector<Matrix> weights(w.begin(), w.end() - 1);
  std::vector<Vector> biases(net.biases().begin(), net.biases().end() - 1);
  std::vector<Activation> activations = net.activations();
  activations.back() = derivative_activation(activations.back());

  Matrix chain = w[0].transpose();
  for (std::size_t i = 1; i < n_hidden; ++i) {
    chain = chain * w[i].transpose();
  }
  Matrix last = derivative_activation_factor(net) * chain * w[n_hidden].row(0).asDiagonal();
  weights.push_back(std::move(last));
  biases.push_back(Vector::Zero(d));
  return FeedforwardNet(std::move(weights), std::move(biases), std::move(activations));
}

void derivative_last_layer_pullback(const FeedforwardNet& net, const Matrix& last_adjoint,
                                    std::vector<Matrix>& weight_grads) {
  const std::size_t n_hidden = net.num_hidden();
  if (n_hidden == 0) {
    return;
  }
  const auto& w = net.weights();
  const double factor = derivative_activation_factor(net);

  // prefix[k] = W_0^T ... W_{k-1}^T, suffix[k] = W_k^T ... W_{N-1}^T.
  std::vector<Matrix> prefix(n_hidden + 1);
  std::vector<Matrix> suffix(n_hidden + 1);
  prefix[0] = Matrix::Identity(w[0].cols(), w[0].cols());
  for (std::size_t k = 0; k < n_hidden; ++k) {
    prefix[k + 1] = prefix[k] * w[k].transpose();
  }
  suffix[n_hidden] = Matrix::Identity(w[n_hidden].cols(), w[n_hidden].cols());
  for (std::size_t k = n_hidden; k-- > 0;) {
    suffix[k] = w[k].transpose() * suffix[k + 1];
  }
  const Matrix& chain = prefix[n_hidden];

  const Eigen::RowVectorXd out_row = w[n_hidden].row(0);
  weight_grads[n_hidden].row(0) +=
      factor * (last_adjoint.cwiseProduct(chain)).colwise().sum();
  const Matrix chain_adjoint = factor * last_adjoint * out_row.asDiagonal();
  for (std::size_t k = 0; k < n_hidden; ++k) {
    const Matrix transposed_adjoint =
        prefix[k].transpose() * chain_adjoint * suffix[k + 1].transpose();
    weight_grads[k] += transposed_adjoint.transpose();
  }
}

}  // namespace incstab
