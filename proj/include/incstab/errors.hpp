#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace incstab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or argument precondition violated by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class UnsupportedGradientError : public Error {
 public:
  using Error::Error;
};

class MissingJacobianError : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefiniteError : public Error {
 public:
  NotPositiveDefiniteError(std::size_t pivot, double value)
      : Error("matrix is not positive definite: pivot " + std::to_string(pivot) +
              " = " + std::to_string(value)),
        pivot_index(pivot),
        pivot_value(value) {}

  std::size_t pivot_index;
  double pivot_value;
};

class BudgetExceededError : public Error {
 public:
  BudgetExceededError(std::size_t required, std::size_t budget)
      : Error("cover needs " + std::to_string(required) + " points, budget is " +
              std::to_string(budget)),
        required_points(required) {}

  std::size_t required_points;
};

class DivergenceError : public Error {
 public:
  DivergenceError(Eigen::VectorXd state, double time)
      : Error("integration diverged after t = " + std::to_string(time)),
        last_state(std::move(state)),
        last_time(time) {}

  Eigen::VectorXd last_state;
  double last_time;
};

class IncompleteBudgetError : public Error {
 public:
  explicit IncompleteBudgetError(const std::string& name)
      : Error("Lipschitz budget is missing '" + name + "'"), missing(name) {}

  std::string missing;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PlantError : public Error {
 public:
  using Error::Error;
};

}  // namespace incstab
