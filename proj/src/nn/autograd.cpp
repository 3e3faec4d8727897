#include "udp/nn/autograd.hpp"

#include <cmath>

#include "udp/error.hpp"

namespace udp::nn {

const Matrix& Var::value() const {
  require(tape_ != nullptr, ErrorKind::kInvariant, "use of an unbound Var");
  return tape_->value_of(*this);
}

double Var::item() const {
  const Matrix& v = value();
  require(v.size() == 1, ErrorKind::kShape, "item() on a non-scalar tensor");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, record_, record_ ? &p : nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  bool any = false;
  if (record_) {
    for (const Var& p : parents) {
      require(p.tape() == this, ErrorKind::kInvariant, "op mixes vars from different tapes");
      any = any || nodes_[p.id()].needs_grad;
    }
  }
  Node node{std::move(value), {}, any, nullptr, {}};
  if (any) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  require(record_, ErrorKind::kInvariant, "backward() on a tape that does not record");
  require(root.tape() == this, ErrorKind::kInvariant, "backward() root from another tape");
  require(value_of(root).size() == 1, ErrorKind::kShape, "backward() root must be a scalar");
  if (!nodes_[root.id()].needs_grad) return;
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    if (n.param != nullptr) n.param->grad += n.grad;
    if (n.backward) {
      // Copy: the callback may append to a parent's grad but never to this node.
      const Matrix g = n.grad;
      n.backward(g, *this);
    }
  }
}

void zero_grad(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

double grad_norm(const ParameterList& params) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

}  // namespace udp::nn
