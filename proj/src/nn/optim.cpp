#include "udp/nn/optim.hpp"

#include <cmath>

#include "udp/error.hpp"

namespace udp::nn {

Adam::Adam(ParameterList params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

double Adam::step() {
  const double norm = grad_norm(params_);
  if (!std::isfinite(norm)) fail(ErrorKind::kNumericalDomain, "non-finite gradient norm");
  const double clip = (options_.clip_norm > 0 && norm > options_.clip_norm) ? options_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    const Matrix g = p.grad * clip;
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    p.value.array() -= options_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + options_.eps);
    p.zero_grad();
  }
  return norm;
}

}  // namespace udp::nn
