#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "udp/anticipator.hpp"
#include "udp/encoder.hpp"
#include "udp/harness.hpp"
#include "udp/planner.hpp"
#include "udp/portrayer.hpp"
#include "udp/strategy.hpp"

namespace udp {

struct StackConfig {
  int N = 1000;
  int T = 10;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  PortrayerConfig portrayer;
  AnticipatorConfig anticipator;
  PlannerConfig planner;
  /// Feed the D_t-weighted persona mixture to the planner instead of the argmax persona.
  bool mixture_persona = false;
};

/// Frozen encoder features plus the three trainable stages.
struct UdpStack {
  UdpStack(Task task, std::shared_ptr<const TextEncoder> encoder, StrategySet strategies, const StackConfig& config,
           std::uint64_t seed);
  UdpStack(const UdpStack&) = delete;
  UdpStack& operator=(const UdpStack&) = delete;

  Task task;
  std::shared_ptr<const TextEncoder> encoder;
  StrategySet strategies;
  StackConfig config;
  nn::Matrix strategy_features;  // K x d
  nn::Matrix persona_bank;       // M x d
  DiffusionSchedule schedule;
  PortrayerModel portrayer;
  AnticipatorModel anticipator;
  PlannerModel planner;

  int max_turns() const { return schedule.T; }
  /// Bank row of the argmax persona, the mixture, or the bank mean before any reply.
  nn::Vector persona_token(const PersonaDistribution* dist) const;
  /// Bank row used for the bridge end point (argmax, or the mean before any reply).
  nn::Vector bridge_persona(const PersonaDistribution* dist) const;
};

/// Encoder outputs for every persona description, in canonical order.
nn::Matrix build_persona_bank(Task task, const TextEncoder& encoder);

/// Frozen inputs for the planning decision at turn t, given the persona
/// estimate available then and the previous user reply (if any).
PlanningRecord planning_inputs(const UdpStack& stack, const DialogueContext& ctx, const PersonaDistribution* dist);

/// The full planner: portrayer chain, per-strategy anticipation, fused policy.
class UdpAgent final : public Policy {
 public:
  enum class Mode { kGreedy, kSample };

  UdpAgent(const UdpStack& stack, Mode mode);

  void begin(const DialogueContext& ctx, std::uint64_t seed) override;
  Decision choose(const DialogueContext& ctx) override;
  std::string name() const override { return mode_ == Mode::kGreedy ? "udp-greedy" : "udp-sample"; }

  const std::vector<PlanningRecord>& records() const { return records_; }
  const std::vector<PolicyDistribution>& policies() const { return policies_; }
  const std::vector<PersonaDistribution>& persona_history() const { return personas_; }

 private:
  const UdpStack& stack_;
  Mode mode_;
  PortrayerState state_;
  Rng rng_;
  std::vector<PlanningRecord> records_;
  std::vector<PolicyDistribution> policies_;
  std::vector<PersonaDistribution> personas_;
};

/// Seed of the portrayer chain inside an episode started with `episode_seed`.
std::uint64_t portrayer_seed(std::uint64_t episode_seed);

struct ReplayResult {
  /// Per transcript, one record per turn (gold action = logged strategy).
  std::vector<std::vector<PlanningRecord>> records;
  /// Per transcript, D_t argmax after each user reply t = 1..L.
  std::vector<std::vector<int>> persona_predictions;
};

/// Re-derives the agent's inputs for logged dialogues, running the portrayer
/// chains in batches. On the agent's own transcripts this follows the same
/// chains, up to floating-point summation order in the batched products.
ReplayResult replay_transcripts(const UdpStack& stack, std::span<const Transcript> transcripts,
                                bool with_records = true);

}  // namespace udp
