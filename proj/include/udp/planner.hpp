#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "udp/nn/layers.hpp"

namespace udp {

struct PlannerConfig {
  int layers = 2;
  int heads = 4;
  /// Feed-forward width inside the fusion layers; 0 means twice the width.
  int ffn = 0;
  /// Hidden width of the action MLP; 0 means the model width.
  int action_hidden = 0;
};

struct PolicyDistribution {
  std::vector<double> probs;
  std::vector<double> logits;
  int turn = 0;

  /// Lowest index wins ties.
  int argmax() const;
};

/// Frozen inputs of one planning decision. Everything upstream of the
/// planner is fixed during RL, so a record is enough to rebuild log pi.
struct PlanningRecord {
  nn::Vector history;   // d
  nn::Vector persona;   // d
  nn::Matrix feedback;  // K x d_z, anticipated means per strategy
  int action = -1;
  int turn = 0;
};

/// Fusion transformer over [state ; persona] plus the action MLP.
class PlannerModel {
 public:
  PlannerModel(int width, int dz, PlannerConfig config, std::uint64_t seed);

  int width() const { return width_; }
  int dz() const { return dz_; }

  /// sp for each row pair (B x d).
  nn::Var fuse(nn::Tape& tape, nn::Var history, nn::Var persona);
  /// A_i = MLP([a_i ; z_i]) row-wise.
  nn::Var action_matrix(nn::Tape& tape, nn::Var strategies, nn::Var feedback);
  /// Logits sp_b . A_(b,k) for K strategies per item, (B x K). `actions` holds B*K rows.
  nn::Var logits(nn::Var sp, nn::Var actions, int K);

  /// Log-policy (B x K) for a batch of records against shared strategy features (K x d).
  nn::Var log_policy(nn::Tape& tape, std::span<const PlanningRecord> records, const nn::Matrix& strategies);

  PolicyDistribution policy(const nn::Vector& history, const nn::Vector& persona, const nn::Matrix& strategies,
                            const nn::Matrix& feedback);

  nn::ParameterList parameters();

 private:
  int width_;
  int dz_;
  PlannerConfig config_;
  nn::Parameter positions_;  // 2 x d
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Mlp action_mlp_;
};

/// softmax(sp . A^T) for one state.
PolicyDistribution policy(const nn::Vector& sp, const nn::Matrix& A);

/// Mean negative log-likelihood of the gold strategies.
nn::Var supervised_loss(nn::Tape& tape, PlannerModel& model, std::span<const PlanningRecord> records,
                        const nn::Matrix& strategies);

/// R_t = sum_{t' >= t} gamma^(T - t') r_t'. With `reward_to_go` the exponent
/// is t' - t instead.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma, bool reward_to_go = false);

/// -sum_t log pi(a_t) R_t over an (n x 1) column of taken-action log-probs.
nn::Var policy_gradient_loss(nn::Var logprobs, std::span<const double> returns);

}  // namespace udp
