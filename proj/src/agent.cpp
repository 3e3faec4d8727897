#include "udp/agent.hpp"

#include <algorithm>

#include "udp/error.hpp"

namespace udp {

nn::Matrix build_persona_bank(Task task, const TextEncoder& encoder) {
  const auto personas = enumerate_personas(task);
  nn::Matrix bank(static_cast<Eigen::Index>(personas.size()), encoder.dim());
  for (const auto& p : personas) {
    bank.row(p.index) = encoder.encode_text(p.description(), SourceKind::kPersona).vector.transpose();
  }
  return bank;
}

UdpStack::UdpStack(Task task_, std::shared_ptr<const TextEncoder> encoder_, StrategySet strategies_,
                   const StackConfig& config_, std::uint64_t seed)
    : task(task_),
      encoder(std::move(encoder_)),
      strategies(std::move(strategies_)),
      config(config_),
      strategy_features(strategies.features(*encoder)),
      persona_bank(build_persona_bank(task, *encoder)),
      schedule(make_schedule(config.N, config.T, config.beta_start, config.beta_end)),
      portrayer(persona_bank, encoder->dim(), config.portrayer, derive_seed(seed, "portrayer.init"), config.N),
      anticipator(encoder->dim(), config.anticipator, derive_seed(seed, "anticipator.init")),
      planner(encoder->dim(), config.anticipator.dz, config.planner, derive_seed(seed, "planner.init")) {
  require(strategies.task() == task, ErrorKind::kConfiguration, "strategy set belongs to another task");
}

nn::Vector UdpStack::persona_token(const PersonaDistribution* dist) const {
  if (dist == nullptr) return persona_bank.colwise().mean().transpose();
  if (config.mixture_persona) {
    const Eigen::Map<const nn::RowVector> w(dist->probs.data(), static_cast<Eigen::Index>(dist->probs.size()));
    return (w * persona_bank).transpose();
  }
  return persona_bank.row(dist->argmax()).transpose();
}

nn::Vector UdpStack::bridge_persona(const PersonaDistribution* dist) const {
  if (dist == nullptr) return persona_bank.colwise().mean().transpose();
  return persona_bank.row(dist->argmax()).transpose();
}

std::uint64_t portrayer_seed(std::uint64_t episode_seed) {
  return derive_seed(derive_seed(episode_seed, "policy"), "portrayer");
}

PlanningRecord planning_inputs(const UdpStack& stack, const DialogueContext& ctx, const PersonaDistribution* dist) {
  const int t = ctx.next_turn();
  PlanningRecord rec;
  rec.turn = t;
  rec.history = stack.encoder->encode_history(ctx.history_lines()).vector;
  rec.persona = stack.persona_token(dist);
  nn::Vector z_prev = nn::Vector::Zero(stack.anticipator.dz());
  if (!ctx.turns.empty()) {
    z_prev = stack.anticipator.golden_state(stack.encoder->encode_text(ctx.turns.back().user_utterance).vector);
  }
  const auto preds =
      stack.anticipator.predict_all(z_prev, stack.strategy_features, stack.bridge_persona(dist), t, stack.max_turns());
  rec.feedback.resize(static_cast<Eigen::Index>(preds.size()), stack.anticipator.dz());
  for (std::size_t k = 0; k < preds.size(); ++k) rec.feedback.row(static_cast<Eigen::Index>(k)) = preds[k].mu.transpose();
  return rec;
}

UdpAgent::UdpAgent(const UdpStack& stack, Mode mode) : stack_(stack), mode_(mode) {}

void UdpAgent::begin(const DialogueContext& ctx, std::uint64_t seed) {
  require(ctx.max_turns == stack_.max_turns(), ErrorKind::kConfiguration,
          "episode turn cap must equal the diffusion turn count");
  state_ = init_portrayer_state(stack_.schedule, stack_.portrayer.state_dim(), derive_seed(seed, "portrayer"));
  rng_.seed(derive_seed(seed, "actions"));
  records_.clear();
  policies_.clear();
  personas_.clear();
}

Decision UdpAgent::choose(const DialogueContext& ctx) {
  const int t = ctx.next_turn();
  require(static_cast<int>(personas_.size()) + 1 <= t, ErrorKind::kInvariant, "agent turn bookkeeping drifted");
  if (t > 1) {
    const auto utts = ctx.user_utterances();
    const nn::Vector cond = stack_.encoder->encode_condition(utts).vector;
    personas_.push_back(denoise_turn(state_, cond, stack_.schedule, stack_.portrayer));
  }
  const PersonaDistribution* dist = personas_.empty() ? nullptr : &personas_.back();
  PlanningRecord rec = planning_inputs(stack_, ctx, dist);
  // policy() runs on a non-recording tape, which only reads parameters.
  PolicyDistribution pi = const_cast<PlannerModel&>(stack_.planner)
                              .policy(rec.history, rec.persona, stack_.strategy_features, rec.feedback);
  pi.turn = t;
  int action = pi.argmax();
  if (mode_ == Mode::kSample) action = sample_categorical(pi.probs, rng_);
  rec.action = action;
  records_.push_back(std::move(rec));
  policies_.push_back(std::move(pi));
  Decision d;
  d.strategy = action;
  if (dist != nullptr) d.predicted_persona = dist->argmax();
  return d;
}

ReplayResult replay_transcripts(const UdpStack& stack, std::span<const Transcript> transcripts, bool with_records) {
  ReplayResult out;
  const std::size_t n = transcripts.size();
  out.records.resize(with_records ? n : 0);
  out.persona_predictions.resize(n);
  std::vector<PortrayerState> states(n);
  std::vector<std::optional<PersonaDistribution>> current(n);
  int longest = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const Transcript& tr = transcripts[k];
    require(tr.task == stack.task, ErrorKind::kData, "transcript task differs from the stack");
    require(tr.length() <= stack.max_turns(), ErrorKind::kData, "transcript longer than the turn cap");
    states[k] = init_portrayer_state(stack.schedule, stack.portrayer.state_dim(), portrayer_seed(tr.seed));
    longest = std::max(longest, tr.length());
  }
  for (int t = 1; t <= longest; ++t) {
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < n; ++k) {
      if (transcripts[k].length() >= t) active.push_back(k);
    }
    if (with_records) {
      for (std::size_t k : active) {
        const Transcript& tr = transcripts[k];
        DialogueContext ctx;
        ctx.task = tr.task;
        ctx.strategies = &stack.strategies;
        ctx.max_turns = stack.max_turns();
        ctx.turns.assign(tr.turns.begin(), tr.turns.begin() + (t - 1));
        PlanningRecord rec = planning_inputs(stack, ctx, current[k] ? &*current[k] : nullptr);
        const DialogueTurn& turn = tr.turns[static_cast<std::size_t>(t - 1)];
        rec.action = stack.strategies.index_of(turn.strategy);
        out.records[k].push_back(std::move(rec));
      }
    }
    // Portrayer block t, conditioned on u_1..u_t.
    std::vector<PortrayerState*> batch;
    nn::Matrix cond(static_cast<Eigen::Index>(active.size()), stack.encoder->dim());
    for (std::size_t r = 0; r < active.size(); ++r) {
      const Transcript& tr = transcripts[active[r]];
      std::vector<std::string> utts;
      for (int s = 0; s < t; ++s) utts.push_back(tr.turns[static_cast<std::size_t>(s)].user_utterance);
      cond.row(static_cast<Eigen::Index>(r)) = stack.encoder->encode_condition(utts).vector.transpose();
      batch.push_back(&states[active[r]]);
    }
    const auto dists = denoise_turn_batch(batch, cond, stack.schedule, stack.portrayer);
    for (std::size_t r = 0; r < active.size(); ++r) {
      current[active[r]] = dists[r];
      out.persona_predictions[active[r]].push_back(dists[r].argmax());
    }
  }
  return out;
}

}  // namespace udp
