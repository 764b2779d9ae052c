#include "incstab/trace.hpp"

#include <algorithm>

#include "incstab/errors.hpp"

namespace incstab {

LossTrace::LossTrace(std::vector<const FeedforwardNet*> nets, std::size_t scalar_count)
    : nets_(std::move(nets)), scalar_count_(scalar_count) {
  for (const auto* n : nets_) {
    if (n == nullptr) {
      throw ContractViolation("loss trace received a null network");
    }
  }
}

LossTrace::Node LossTrace::push(Record r) {
  for (Node a : r.args) {
    if (a >= nodes_.size()) {
      throw ContractViolation("loss trace operand refers to a future node");
    }
    r.live = r.live || nodes_[a].live;
  }
  nodes_.push_back(std::move(r));
  return nodes_.size() - 1;
}

const LossTrace::Record& LossTrace::at(Node n) const {
  if (n >= nodes_.size()) {
    throw ContractViolation("unknown loss trace node");
  }
  return nodes_[n];
}

double LossTrace::scalar(Node n) const {
  const auto& v = at(n).value;
  if (v.size() != 1) {
    throw ContractViolation("node is not a scalar");
  }
  return v[0];
}

LossTrace::Node LossTrace::constant(Vector value) {
  Record r{Kind::Constant, {}, std::move(value)};
  return push(std::move(r));
}

LossTrace::Node LossTrace::constant(double value) { return constant(Vector::Constant(1, value)); }

LossTrace::Node LossTrace::scalar_parameter(std::size_t index, double value) {
  if (index >= scalar_count_) {
    throw ContractViolation("scalar parameter index out of range");
  }
  Record r{Kind::ScalarParameter, {}, Vector::Constant(1, value)};
  r.live = true;
  r.index = index;
  return push(std::move(r));
}

LossTrace::Node LossTrace::net_eval(std::size_t net, Node input, bool with_gradient) {
  if (net >= nets_.size()) {
    throw ContractViolation("network index out of range");
  }
  const FeedforwardNet& model = *nets_[net];
  if (with_gradient) {
    if (model.output_dim() != 1) {
      throw ContractViolation("input gradient needs a scalar-output network");
    }
    if (!model.is_smooth()) {
      throw UnsupportedGradientError("input gradient needs smooth hidden activations");
    }
  }
  Record r{Kind::NetEval, {input}, Vector()};
  r.cache = forward_cached(model, at(input).value);
  if (with_gradient) {
    const Vector grad = input_gradient(model, at(input).value);
    r.value.resize(1 + grad.size());
    r.value << r.cache.output, grad;
  } else {
    r.value = r.cache.output;
  }
  r.live = true;
  r.index = net;
  r.with_gradient = with_gradient;
  return push(std::move(r));
}

LossTrace::Node LossTrace::saturate(Node u, const SaturationBox& box) {
  const Vector& raw = at(u).value;
  Record r{Kind::Saturate, {u}, box.clamp(raw)};
  r.mask = ((raw.array() > box.u_min.array()) && (raw.array() < box.u_max.array())).cast<double>();
  return push(std::move(r));
}

LossTrace::Node LossTrace::black_box(Node x, Node u, Vector value, std::optional<Matrix> jac_x,
                                     std::optional<Matrix> jac_u) {
  const auto n = value.size();
  if (jac_x && (jac_x->rows() != n || jac_x->cols() != at(x).value.size())) {
    throw ContractViolation("state Jacobian has the wrong shape");
  }
  if (jac_u && (jac_u->rows() != n || jac_u->cols() != at(u).value.size())) {
    throw ContractViolation("input Jacobian has the wrong shape");
  }
  Record r{Kind::BlackBox, {x, u}, std::move(value)};
  r.jac_x = std::move(jac_x);
  r.jac_u = std::move(jac_u);
  return push(std::move(r));
}

LossTrace::Node LossTrace::slice(Node a, std::size_t start, std::size_t length) {
  const Vector& v = at(a).value;
  if (start + length > static_cast<std::size_t>(v.size())) {
    throw ContractViolation("slice out of range");
  }
  Record r{Kind::Slice, {a},
           v.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(length))};
  r.index = start;
  return push(std::move(r));
}

LossTrace::Node LossTrace::concat(Node a, Node b) {
  const Vector& va = at(a).value;
  const Vector& vb = at(b).value;
  Vector v(va.size() + vb.size());
  v << va, vb;
  return push(Record{Kind::Concat, {a, b}, std::move(v)});
}

LossTrace::Node LossTrace::dot(Node a, Node b) {
  const Vector& va = at(a).value;
  const Vector& vb = at(b).value;
  if (va.size() != vb.size()) {
    throw ContractViolation("dot product of vectors with different lengths");
  }
  return push(Record{Kind::Dot, {a, b}, Vector::Constant(1, va.dot(vb))});
}

LossTrace::Node LossTrace::add(Node a, Node b) {
  if (at(a).value.size() != at(b).value.size()) {
    throw ContractViolation("sum of vectors with different lengths");
  }
  return push(Record{Kind::Add, {a, b}, at(a).value + at(b).value});
}

LossTrace::Node LossTrace::sub(Node a, Node b) {
  if (at(a).value.size() != at(b).value.size()) {
    throw ContractViolation("difference of vectors with different lengths");
  }
  return push(Record{Kind::Sub, {a, b}, at(a).value - at(b).value});
}

LossTrace::Node LossTrace::scale(Node a, double s) {
  Record r{Kind::Scale, {a}, s * at(a).value};
  r.factor = s;
  return push(std::move(r));
}

LossTrace::Node LossTrace::offset(Node a, double c) {
  return push(Record{Kind::Offset, {a}, (at(a).value.array() + c).matrix()});
}

LossTrace::Node LossTrace::hinge(Node a) {
  return push(Record{Kind::Hinge, {a}, at(a).value.cwiseMax(0.0)});
}

LossTrace::Node LossTrace::sum(const std::vector<Node>& terms) {
  if (terms.empty()) {
    return constant(0.0);
  }
  Vector v = at(terms.front()).value;
  for (std::size_t i = 1; i < terms.size(); ++i) {
    if (at(terms[i]).value.size() != v.size()) {
      throw ContractViolation("sum of vectors with different lengths");
    }
    v += at(terms[i]).value;
  }
  return push(Record{Kind::Sum, terms, std::move(v)});
}

LossTrace::Node LossTrace::reduce_sum(Node a) {
  return push(Record{Kind::ReduceSum, {a}, Vector::Constant(1, at(a).value.sum())});
}

TraceGradients LossTrace::backward(Node root) const {
  if (at(root).value.size() != 1) {
    throw ContractViolation("backward needs a scalar root");
  }
  TraceGradients out;
  for (const auto* n : nets_) {
    out.nets.push_back(NetGradients::zeros_like(*n));
  }
  out.scalars = Vector::Zero(static_cast<Eigen::Index>(scalar_count_));

  std::vector<Vector> adj(root + 1);
  adj[root] = Vector::Ones(1);
  auto accumulate = [&](Node target, const Vector& g) {
    if (!nodes_[target].live) {
      return;
    }
    if (adj[target].size() == 0) {
      adj[target] = g;
    } else {
      adj[target] += g;
    }
  };

  for (Node n = root + 1; n-- > 0;) {
    const Record& r = nodes_[n];
    if (!r.live || adj[n].size() == 0) {
      continue;
    }
    const Vector& g = adj[n];
    switch (r.kind) {
      case Kind::Constant:
        break;
      case Kind::ScalarParameter:
        out.scalars[static_cast<Eigen::Index>(r.index)] += g[0];
        break;
      case Kind::NetEval: {
        const FeedforwardNet& model = *nets_[r.index];
        const auto out_dim = static_cast<Eigen::Index>(model.output_dim());
        const Vector y_adj = g.head(out_dim);
        const Vector grad_adj = r.with_gradient ? Vector(g.tail(g.size() - out_dim)) : Vector();
        const Vector input_adj = pullback(model, r.cache, y_adj, grad_adj, out.nets[r.index]);
        accumulate(r.args[0], input_adj);
        break;
      }
      case Kind::Saturate:
        accumulate(r.args[0], g.cwiseProduct(r.mask));
        break;
      case Kind::BlackBox:
        if (nodes_[r.args[0]].live) {
          if (!r.jac_x) {
            throw MissingJacobianError("black-box node " + std::to_string(n) +
                                       " has no state Jacobian attached");
          }
          accumulate(r.args[0], r.jac_x->transpose() * g);
        }
        if (nodes_[r.args[1]].live) {
          if (!r.jac_u) {
            throw MissingJacobianError("black-box node " + std::to_string(n) +
                                       " has no input Jacobian attached");
          }
          accumulate(r.args[1], r.jac_u->transpose() * g);
        }
        break;
      case Kind::Slice: {
        Vector full = Vector::Zero(nodes_[r.args[0]].value.size());
        full.segment(static_cast<Eigen::Index>(r.index), g.size()) = g;
        accumulate(r.args[0], full);
        break;
      }
      case Kind::Concat: {
        const auto na = nodes_[r.args[0]].value.size();
        accumulate(r.args[0], g.head(na));
        accumulate(r.args[1], g.tail(g.size() - na));
        break;
      }
      case Kind::Dot:
        accumulate(r.args[0], g[0] * nodes_[r.args[1]].value);
        accumulate(r.args[1], g[0] * nodes_[r.args[0]].value);
        break;
      case Kind::Add:
        accumulate(r.args[0], g);
        accumulate(r.args[1], g);
        break;
      case Kind::Sub:
        accumulate(r.args[0], g);
        accumulate(r.args[1], -g);
        break;
      case Kind::Scale:
        accumulate(r.args[0], r.factor * g);
        break;
      case Kind::Offset:
        accumulate(r.args[0], g);
        break;
      case Kind::Hinge: {
        const Vector active = (nodes_[r.args[0]].value.array() > 0.0).cast<double>();
        accumulate(r.args[0], g.cwiseProduct(active));
        break;
      }
      case Kind::Sum:
        for (Node a : r.args) {
          accumulate(a, g);
        }
        break;
      case Kind::ReduceSum:
        accumulate(r.args[0], Vector::Constant(nodes_[r.args[0]].value.size(), g[0]));
        break;
    }
  }
  return out;
}

}  // namespace incstab
