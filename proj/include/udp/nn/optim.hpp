#pragma once

#include <vector>

#include "udp/nn/autograd.hpp"

namespace udp::nn {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(ParameterList params, AdamOptions options);

  /// Clips, applies one update and zeroes the gradients. Returns the
  /// pre-clip gradient norm.
  double step();

  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  long steps() const { return t_; }

  // Moment buffers, exposed for checkpointing.
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  ParameterList params_;
  AdamOptions options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace udp::nn
