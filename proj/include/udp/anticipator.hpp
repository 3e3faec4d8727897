#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "udp/nn/layers.hpp"

namespace udp {

struct AnticipatorConfig {
  int dz = 128;
  int hidden = 256;
};

struct FeedbackPrediction {
  nn::Vector mu;
  double sigma2 = 0.0;
  int strategy = -1;
  int turn = 0;
};

/// Closed-form bridge moments for one strategy, given already-mapped states.
/// psi is the positive variance factor psi(z_a).
FeedbackPrediction bridge_moments(const nn::Vector& z_prev, const nn::Vector& z_a, const nn::Vector& z_T, double psi,
                                  int t, int T);

/// f_U, f_P, f_a and psi over a shared bridge dimension d_z.
class AnticipatorModel {
 public:
  AnticipatorModel(int embed_dim, AnticipatorConfig config, std::uint64_t seed);

  int dz() const { return config_.dz; }
  int embed_dim() const { return embed_dim_; }

  nn::Var f_u(nn::Tape& tape, nn::Var u);
  nn::Var f_p(nn::Tape& tape, nn::Var p);
  nn::Var f_a(nn::Tape& tape, nn::Var a);
  /// softplus(MLP(z_a)) + 1e-6, (B x 1).
  nn::Var psi(nn::Tape& tape, nn::Var z_a);

  /// z+ = f_U(u): the golden state of a user utterance embedding.
  nn::Vector golden_state(const nn::Vector& utterance) const;
  /// Bridge moments for each candidate strategy feature (rows of `strategies`).
  /// z_prev is a bridge state (zero at t = 1).
  std::vector<FeedbackPrediction> predict_all(const nn::Vector& z_prev, const nn::Matrix& strategies,
                                              const nn::Vector& persona, int t, int T) const;
  FeedbackPrediction predict_feedback(const nn::Vector& z_prev, const nn::Vector& strategy, const nn::Vector& persona,
                                      int t, int T) const;

  nn::ParameterList parameters();

 private:
  nn::Matrix eval(const nn::Mlp& net, const nn::Matrix& x) const;

  int embed_dim_;
  AnticipatorConfig config_;
  nn::Mlp fu_, fp_, fa_, psi_;
};

/// One training item: the previous user utterance (absent at t = 1), the
/// chosen strategy's feature, the gold persona embedding and the actual reply.
struct AnticipatorExample {
  nn::Vector prev_utterance;  // empty at t = 1
  nn::Vector strategy;
  nn::Vector persona;
  nn::Vector reply;
  int turn = 1;
};

struct ContrastiveOutput {
  nn::Var loss;
  /// Items whose highest-scoring candidate is their own golden state.
  int top1 = 0;
};

/// In-batch contrastive loss with logits -||mu_b - z+_c||^2 / (2 sigma2_b).
ContrastiveOutput contrastive_loss(nn::Tape& tape, AnticipatorModel& model, std::span<const AnticipatorExample> batch,
                                   int T);

/// The same loss from explicit moments and golden states (rows).
nn::Var contrastive_from_moments(nn::Var mu, nn::Var sigma2, nn::Var golden);

}  // namespace udp
