#include <doctest.h>

#include <sstream>

#include "incstab/errors.hpp"
#include "incstab/net.hpp"
#include "incstab/net_io.hpp"
#include "support.hpp"

using namespace incstab;
using testing::dense_net;
using testing::random_vector;

TEST_CASE("zero network maps everything to zero") {
  FeedforwardNet net({Matrix::Zero(4, 3), Matrix::Zero(2, 4)}, {Vector::Zero(4), Vector::Zero(2)},
                     {Activation::Tanh});
  std::mt19937_64 rng(1);
  CHECK(forward(net, random_vector(rng, 3)).isZero(0.0));
}

TEST_CASE("affine network") {
  FeedforwardNet net({Matrix::Constant(1, 1, 2.0)}, {Vector::Constant(1, 1.0)}, {});
  CHECK(forward(net, Vector::Constant(1, 3.0))[0] == doctest::Approx(7.0));
  CHECK(input_gradient(net, Vector::Constant(1, -4.0))[0] == doctest::Approx(2.0));
}

TEST_CASE("one hidden tanh layer matches a hand-written recursion") {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    FeedforwardNet net = dense_net(rng, 3, {7}, 1, Activation::Tanh);
    const Vector x = random_vector(rng, 3);
    const double expected = testing::one_layer_tanh(net.weights()[0], net.biases()[0],
                                                    net.weights()[1], net.biases()[1][0], x);
    CHECK(forward(net, x)[0] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("input gradient matches central differences") {
  std::mt19937_64 rng(3);
  for (auto act : {Activation::Tanh, Activation::Softplus}) {
    for (int rep = 0; rep < 50; ++rep) {
      FeedforwardNet net = dense_net(rng, 4, {6, 5}, 1, act);
      const Vector x = random_vector(rng, 4);
      const Vector fd = testing::central_difference(
          [&](const Vector& z) { return forward(net, z)[0]; }, x, 1e-5);
      CHECK(testing::relative_error(input_gradient(net, x), fd) <= 1e-5);
    }
  }
}

TEST_CASE("softplus secant slope lies between endpoint gradients") {
  std::mt19937_64 rng(4);
  // A single softplus unit is convex along any line.
  FeedforwardNet net({Matrix::Constant(1, 2, 0.7), Matrix::Constant(1, 1, 1.3)},
                     {Vector::Constant(1, 0.2), Vector::Zero(1)}, {Activation::Softplus});
  for (int rep = 0; rep < 20; ++rep) {
    const Vector x = random_vector(rng, 2);
    const double d = 1e-3;
    Vector xd = x;
    xd[0] += d;
    const double secant = (forward(net, xd)[0] - forward(net, x)[0]) / d;
    const double g0 = input_gradient(net, x)[0];
    const double g1 = input_gradient(net, xd)[0];
    CHECK(secant >= std::min(g0, g1) - 1e-9);
    CHECK(secant <= std::max(g0, g1) + 1e-9);
  }
}

TEST_CASE("gradient of a ReLU net is rejected") {
  std::mt19937_64 rng(5);
  FeedforwardNet net = dense_net(rng, 2, {3}, 1, Activation::ReLU);
  CHECK_THROWS_AS(input_gradient(net, Vector::Zero(2)), UnsupportedGradientError);
  CHECK_THROWS_AS(net.require_clf_role(), ContractViolation);
}

TEST_CASE("shape errors") {
  std::mt19937_64 rng(6);
  FeedforwardNet net = dense_net(rng, 2, {3}, 1, Activation::Tanh);
  CHECK_THROWS_AS(forward(net, Vector::Zero(3)), ContractViolation);
  CHECK_THROWS_AS(FeedforwardNet({Matrix::Zero(3, 2), Matrix::Zero(1, 4)},
                                 {Vector::Zero(3), Vector::Zero(1)}, {Activation::Tanh}),
                  ContractViolation);
}

TEST_CASE("saturation") {
  FeedforwardNet net({Matrix::Zero(2, 3)}, {Vector(Vector::Constant(2, -9.0))}, {});
  const SaturationBox box(Vector::Constant(2, -1.0), Vector::Constant(2, 1.0));
  CHECK(saturated_output(net, Vector::Zero(2), Vector::Zero(1), box) == box.u_min);

  FeedforwardNet inside({Matrix::Zero(2, 3)}, {Vector(Vector::Constant(2, 0.25))}, {});
  CHECK(saturated_output(inside, Vector::Zero(2), Vector::Zero(1), box) ==
        Vector::Constant(2, 0.25));

  const SaturationBox unit(Vector::Constant(1, -1.0), Vector::Constant(1, 1.0));
  CHECK(unit.clamp(Vector::Constant(1, 5.0))[0] == 1.0);
  CHECK_THROWS_AS(SaturationBox(Vector::Constant(1, 1.0), Vector::Constant(1, 1.0)),
                  ContractViolation);
}

TEST_CASE("derivative network of a one-layer net reproduces the gradient") {
  std::mt19937_64 rng(7);
  for (auto act : {Activation::Tanh, Activation::Softplus}) {
    FeedforwardNet net = dense_net(rng, 3, {5}, 1, act);
    const FeedforwardNet d = derivative_network(net);
    CHECK(d.output_dim() == 3);
    CHECK(d.input_dim() == 3);
    // theta_hat = theta_0^T diag(theta_1)
    const Matrix expected = net.weights()[0].transpose() * net.weights()[1].row(0).asDiagonal();
    CHECK((d.weights()[1] - expected).norm() <= 1e-14);
    CHECK(d.biases()[1].isZero(0.0));
    CHECK(derivative_activation_factor(net) == 1.0);
    for (int rep = 0; rep < 10; ++rep) {
      const Vector x = random_vector(rng, 3);
      CHECK((forward(d, x) - input_gradient(net, x)).norm() <= 1e-12);
    }
  }
}

TEST_CASE("derivative network of a two-layer tanh net") {
  std::mt19937_64 rng(8);
  FeedforwardNet net = dense_net(rng, 2, {4, 3}, 1, Activation::Tanh);
  const FeedforwardNet d = derivative_network(net);
  const auto& w = net.weights();
  const Matrix expected =
      w[0].transpose() * w[1].transpose() * w[2].row(0).asDiagonal();
  CHECK((d.weights()[2] - expected).norm() <= 1e-13);
  CHECK(d.activations()[0] == Activation::Tanh);
  CHECK(d.activations()[1] == Activation::TanhDerivative);
  CHECK(d.output_dim() == 2);
}

TEST_CASE("derivative network rejects vector outputs") {
  std::mt19937_64 rng(9);
  CHECK_THROWS_AS(derivative_network(dense_net(rng, 2, {3}, 2, Activation::Tanh)),
                  ContractViolation);
}

TEST_CASE("pullback through the input gradient matches parameter differences") {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 10; ++rep) {
    FeedforwardNet net = dense_net(rng, 3, {5, 4}, 1, rep % 2 ? Activation::Tanh
                                                               : Activation::Softplus);
    const Vector x = random_vector(rng, 3);
    const Vector v = random_vector(rng, 3);
    auto grads = NetGradients::zeros_like(net);
    pullback(net, forward_cached(net, x), Vector::Constant(1, 0.5), v, grads);
    const auto fd = testing::parameter_fd(
        {&net}, [&] { return 0.5 * forward(net, x)[0] + input_gradient(net, x).dot(v); }, 1e-6);
    CHECK(testing::relative_error(testing::flatten(grads), fd) <= 1e-6);
  }
}

TEST_CASE("weights round-trip through text") {
  std::mt19937_64 rng(11);
  FeedforwardNet net = dense_net(rng, 2, {3, 4}, 2, Activation::Softplus);
  std::stringstream ss;
  write_net(ss, net);
  CHECK(read_net(ss) == net);

  std::stringstream bad("incstab-net 99\n");
  CHECK_THROWS_AS(read_net(bad), ConfigError);
  CHECK(parse_double(format_double(0.1)) == 0.1);
  CHECK_THROWS(parse_double("1.0abc"));
}
