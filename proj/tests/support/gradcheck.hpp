#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "udp/nn/autograd.hpp"

namespace udp::testing {

struct GradCheck {
  /// ||analytic - numeric|| / (||analytic|| + ||numeric||) over checked entries.
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  int entries = 0;
};

/// Central differences on up to `per_param` random entries of each parameter.
inline GradCheck grad_check(const nn::ParameterList& params, const std::function<nn::Var(nn::Tape&)>& loss_fn,
                            int per_param = 12, double h = 1e-6, std::uint64_t seed = 7) {
  nn::zero_grad(params);
  {
    nn::Tape tape;
    const nn::Var loss = loss_fn(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    nn::Tape tape(false);
    return tape.value_of(loss_fn(tape))(0, 0);
  };
  std::mt19937_64 rng(seed);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  GradCheck out;
  for (nn::Parameter* p : params) {
    const auto size = p->value.size();
    std::uniform_int_distribution<Eigen::Index> pick(0, size - 1);
    const int count = static_cast<int>(std::min<Eigen::Index>(size, per_param));
    for (int k = 0; k < count; ++k) {
      const Eigen::Index idx = size <= per_param ? k : pick(rng);
      double& w = p->value.data()[idx];
      const double orig = w;
      w = orig + h;
      const double up = eval();
      w = orig - h;
      const double down = eval();
      w = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[idx];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++out.entries;
    }
  }
  out.analytic_norm = std::sqrt(a2);
  const double denom = std::sqrt(a2) + std::sqrt(n2);
  out.relative_error = denom > 0 ? std::sqrt(diff2) / denom : 0.0;
  nn::zero_grad(params);
  return out;
}

}  // namespace udp::testing
