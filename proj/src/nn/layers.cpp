#include "udp/nn/layers.hpp"

#include <cmath>

#include "udp/error.hpp"

namespace udp::nn {

Var activate(Var x, Activation act) {
  switch (act) {
    case Activation::kSilu: return silu(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kRelu: return relu(x);
  }
  return x;
}

Linear::Linear(std::string name, int in, int out, std::mt19937_64& rng, double gain) {
  require(in > 0 && out > 0, ErrorKind::kConfiguration, "linear layer sizes must be positive");
  const double bound = gain / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  weight_ = Parameter(name + ".weight", std::move(w));
  bias_ = Parameter(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::forward(Tape& tape, Var x) {
  return add_row(matmul(x, tape.parameter(weight_)), tape.parameter(bias_));
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Mlp::Mlp(std::string name, const std::vector<int>& sizes, std::mt19937_64& rng, Activation act,
         double last_gain)
    : act_(act) {
  require(sizes.size() >= 2, ErrorKind::kConfiguration, "mlp needs at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const bool last = i + 2 == sizes.size();
    layers_.emplace_back(name + "." + std::to_string(i), sizes[i], sizes[i + 1], rng,
                         last ? last_gain : 1.0);
  }
}

Var Mlp::forward(Tape& tape, Var x) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(tape, x);
    if (i + 1 < layers_.size()) x = activate(x, act_);
  }
  return x;
}

void Mlp::collect(ParameterList& out) {
  for (auto& l : layers_) l.collect(out);
}

LayerNorm::LayerNorm(std::string name, int width)
    : gain_(name + ".gain", Matrix::Ones(1, width)), bias_(name + ".bias", Matrix::Zero(1, width)) {}

Var LayerNorm::forward(Tape& tape, Var x) {
  return layer_norm_rows(x, tape.parameter(gain_), tape.parameter(bias_));
}

void LayerNorm::collect(ParameterList& out) {
  out.push_back(&gain_);
  out.push_back(&bias_);
}

TransformerLayer::TransformerLayer(std::string name, int width, int heads, int ffn_width,
                                   std::mt19937_64& rng)
    : heads_(heads),
      ln_attn_(name + ".ln_attn", width),
      q_(name + ".q", width, width, rng),
      k_(name + ".k", width, width, rng),
      v_(name + ".v", width, width, rng),
      o_(name + ".o", width, width, rng),
      ln_ffn_(name + ".ln_ffn", width),
      ffn_(name + ".ffn", {width, ffn_width, width}, rng) {
  require(heads > 0 && width % heads == 0, ErrorKind::kConfiguration,
          "transformer width must be divisible by the head count");
}

Var TransformerLayer::forward(Tape& tape, Var x, int seq_len) {
  Var h = ln_attn_.forward(tape, x);
  Var att = multi_head_attention(q_.forward(tape, h), k_.forward(tape, h), v_.forward(tape, h), seq_len,
                                 heads_);
  x = add(x, o_.forward(tape, att));
  return add(x, ffn_.forward(tape, ln_ffn_.forward(tape, x)));
}

void TransformerLayer::collect(ParameterList& out) {
  ln_attn_.collect(out);
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  o_.collect(out);
  ln_ffn_.collect(out);
  ffn_.collect(out);
}

Matrix sinusoidal_embedding(int step, int dim) {
  Matrix out(1, dim);
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / std::max(1, half));
    out(0, j) = std::sin(step * freq);
    out(0, half + j) = std::cos(step * freq);
  }
  if (dim % 2 == 1) out(0, dim - 1) = 0.0;
  return out;
}

}  // namespace udp::nn
