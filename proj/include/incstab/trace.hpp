#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "incstab/net.hpp"

namespace incstab {

struct TraceGradients {
  std::vector<NetGradients> nets;
  Vector scalars;
};

/// Recorded loss graph over a fixed set of networks and trainable scalars.
/// Every node holds a vector value; scalars are length-1 vectors. Nodes are
/// appended in evaluation order, so reverse creation order is a valid
/// reverse topological order.
class LossTrace {
 public:
  using Node = std::size_t;

  LossTrace(std::vector<const FeedforwardNet*> nets, std::size_t scalar_count);

  Node constant(Vector value);
  Node constant(double value);
  Node scalar_parameter(std::size_t index, double value);

  /// Output of network `net` at `input`. With `with_gradient` the node value
  /// is [output; d output / d input] and the network must be scalar-valued.
  Node net_eval(std::size_t net, Node input, bool with_gradient = false);
  Node saturate(Node u, const SaturationBox& box);
  /// Leaf for a black-box map value = f(x, u). Jacobians are only needed for
  /// operands that depend on trainable quantities; backward() throws
  /// MissingJacobianError when one is required but absent.
  Node black_box(Node x, Node u, Vector value, std::optional<Matrix> jac_x,
                 std::optional<Matrix> jac_u);

  Node slice(Node a, std::size_t start, std::size_t length);
  Node concat(Node a, Node b);
  Node dot(Node a, Node b);
  Node add(Node a, Node b);
  Node sub(Node a, Node b);
  Node scale(Node a, double s);
  Node offset(Node a, double c);
  Node hinge(Node a);
  Node sum(const std::vector<Node>& terms);
  Node reduce_sum(Node a);

  const Vector& value(Node n) const { return nodes_.at(n).value; }
  double scalar(Node n) const;
  bool depends_on_parameters(Node n) const { return nodes_.at(n).live; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode derivatives of the scalar node `root` with respect to all
  /// network parameters and trainable scalars.
  TraceGradients backward(Node root) const;

 private:
  enum class Kind {
    Constant,
    ScalarParameter,
    NetEval,
    Saturate,
    BlackBox,
    Slice,
    Concat,
    Dot,
    Add,
    Sub,
    Scale,
    Offset,
    Hinge,
    Sum,
    ReduceSum
  };

  struct Record {
    Kind kind;
    std::vector<Node> args;
    Vector value;
    bool live = false;
    std::size_t index = 0;  // net index, scalar index or slice start
    bool with_gradient = false;
    double factor = 0.0;
    ForwardCache cache;
    Vector mask;
    std::optional<Matrix> jac_x;
    std::optional<Matrix> jac_u;
  };

  Node push(Record r);
  const Record& at(Node n) const;

  std::vector<const FeedforwardNet*> nets_;
  std::size_t scalar_count_;
  std::vector<Record> nodes_;
};

}  // namespace incstab
