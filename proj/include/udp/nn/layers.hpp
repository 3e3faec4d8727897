#pragma once

#include <random>
#include <string>
#include <vector>

#include "udp/nn/autograd.hpp"
#include "udp/nn/ops.hpp"

namespace udp::nn {

enum class Activation { kSilu, kTanh, kRelu };

Var activate(Var x, Activation act);

/// y = x W + b, W stored (in x out).
class Linear {
 public:
  Linear() = default;
  /// `gain` scales the default 1/sqrt(in) uniform init.
  Linear(std::string name, int in, int out, std::mt19937_64& rng, double gain = 1.0);

  Var forward(Tape& tape, Var x);
  void collect(ParameterList& out);

  int in_features() const { return static_cast<int>(weight_.value.rows()); }
  int out_features() const { return static_cast<int>(weight_.value.cols()); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
};

/// Fully connected stack; activation between layers, none after the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, const std::vector<int>& sizes, std::mt19937_64& rng,
      Activation act = Activation::kSilu, double last_gain = 1.0);

  Var forward(Tape& tape, Var x);
  void collect(ParameterList& out);

  int in_features() const { return layers_.front().in_features(); }
  int out_features() const { return layers_.back().out_features(); }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation act_ = Activation::kSilu;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, int width);

  Var forward(Tape& tape, Var x);
  void collect(ParameterList& out);

 private:
  Parameter gain_;
  Parameter bias_;
};

/// Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x)).
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::string name, int width, int heads, int ffn_width, std::mt19937_64& rng);

  Var forward(Tape& tape, Var x, int seq_len);
  void collect(ParameterList& out);

 private:
  int heads_ = 1;
  LayerNorm ln_attn_;
  Linear q_, k_, v_, o_;
  LayerNorm ln_ffn_;
  Mlp ffn_;
};

/// Sinusoidal features of an integer step, (1 x dim).
Matrix sinusoidal_embedding(int step, int dim);

}  // namespace udp::nn
