#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "udp/nn/layers.hpp"
#include "udp/util.hpp"

namespace udp {

/// Linear-beta DDPM schedule over N steps, split into T dialogue turns.
/// betas[0] is unused and alphas_bar[0] = 1.
struct DiffusionSchedule {
  int N = 1000;
  int T = 10;
  std::vector<double> betas;
  std::vector<double> alphas_bar;

  int steps_per_turn() const { return N / T; }
};

DiffusionSchedule make_schedule(int N = 1000, int T = 10, double beta_start = 1e-4, double beta_end = 0.02);

/// Noise index after turn t: N(1 - t/T).
int turn_noise_index(int t, const DiffusionSchedule& schedule);

struct NoisedSample {
  nn::Vector x;
  nn::Vector eps;
};

/// x_i = sqrt(abar_i) x0 + sqrt(1 - abar_i) eps with eps ~ N(0, I).
NoisedSample forward_noise(const nn::Vector& x0, int i, const DiffusionSchedule& schedule, Rng& rng);

/// Inverts the closed-form forward process given a noise estimate.
nn::Vector estimate_x0(const nn::Vector& x, const nn::Vector& eps_hat, int i, const DiffusionSchedule& schedule);

struct PersonaDistribution {
  std::vector<double> probs;
  int turn = 0;

  /// Lowest index wins ties.
  int argmax() const;
};

/// softmax(cos(x0_hat, p_j) / temperature) over the rows of `bank`.
PersonaDistribution persona_distribution(const nn::Vector& x0_hat, const nn::Matrix& bank, double temperature);

struct PortrayerConfig {
  /// Hidden width of the noise net; 0 means twice the state width.
  int hidden = 0;
  int step_features = 32;
  double temperature = 0.1;
  /// Training draws i uniformly from turn t's denoising block instead of
  /// fixing it at the block's end.
  bool sample_block = true;
};

/// Noise net over [x_i ; step features ; condition] plus a frozen persona bank.
///
/// The network outputs an x0 estimate on the sphere of the bank's mean norm;
/// the noise estimate is derived from it, so estimate_x0 returns that point.
class PortrayerModel {
 public:
  PortrayerModel(nn::Matrix persona_bank, int condition_dim, PortrayerConfig config, std::uint64_t seed,
                 int N = 1000);

  int state_dim() const { return static_cast<int>(bank_.cols()); }
  int condition_dim() const { return condition_dim_; }
  int persona_count() const { return static_cast<int>(bank_.rows()); }
  const nn::Matrix& bank() const { return bank_; }
  const PortrayerConfig& config() const { return config_; }

  /// Batched x0 prediction (B x d) on a tape.
  nn::Var predict_x0(nn::Tape& tape, nn::Var x, std::span<const int> steps, nn::Var condition);
  /// Logits cos(x0, P) / temperature (B x M).
  nn::Var logits(nn::Tape& tape, nn::Var x0);

  /// Tape-free batched x0 prediction. `condition_proj` comes from project_condition.
  nn::Matrix predict_x0(const nn::Matrix& x, int step, const nn::Matrix& condition_proj) const;
  /// First-layer contribution of the condition, reused for a whole turn.
  nn::Matrix project_condition(const nn::Matrix& condition) const;

  nn::ParameterList parameters();
  /// Call after any parameter update so tape-free inference sees new weights.
  void refresh_cache();

 private:
  nn::Matrix step_table_;       // (N+1) x step_features
  nn::Matrix step_projection_;  // (N+1) x hidden, cached
  nn::Matrix bank_;
  nn::Matrix bank_unit_;
  double bank_norm_ = 1.0;
  int condition_dim_ = 0;
  PortrayerConfig config_;
  nn::Mlp net_;
};

/// One dialogue's reverse chain.
struct PortrayerState {
  nn::Vector x;
  int turn = 0;
  int i = 0;
  Rng rng;
};

PortrayerState init_portrayer_state(const DiffusionSchedule& schedule, int dim, std::uint64_t seed);

/// Runs N/T reverse steps under `condition` (mean embedding of u_1..u_t) and
/// returns D_t computed from the post-turn state.
PersonaDistribution denoise_turn(PortrayerState& state, const nn::Vector& condition,
                                 const DiffusionSchedule& schedule, const PortrayerModel& model);

/// Batched variant; every state must be at the same turn. Each state draws
/// its noise from its own generator so results match the unbatched path.
std::vector<PersonaDistribution> denoise_turn_batch(std::span<PortrayerState*> states, const nn::Matrix& conditions,
                                                    const DiffusionSchedule& schedule, const PortrayerModel& model);

struct PortrayerExample {
  nn::Vector condition;
  int turn = 1;
  int label = 0;
};

/// Mean cross-entropy of D_t against the gold persona. x0 is the gold
/// persona embedding, forward-noised to the sampled index.
nn::Var portrayer_loss(nn::Tape& tape, PortrayerModel& model, std::span<const PortrayerExample> batch,
                       const DiffusionSchedule& schedule, Rng& rng);

}  // namespace udp
