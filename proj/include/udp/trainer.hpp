#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "udp/agent.hpp"
#include "udp/chat.hpp"
#include "udp/harness.hpp"
#include "udp/nn/checkpoint.hpp"
#include "udp/persona.hpp"

namespace udp {

/// Builds a fresh actor triple; called once per episode.
using ActorFactory = std::function<ActorSet()>;

struct PretrainCorpus {
  Task task = Task::kP4G;
  std::vector<Transcript> dialogues;

  std::string hash() const { return transcripts_hash(dialogues); }
};

struct CorpusOptions {
  /// Dialogues per profile: 2 for P4G, one per situation (10) for ESConv.
  int dialogues_per_profile = 2;
  /// Situations cycled across a profile's dialogues (ESConv).
  std::vector<std::string> situations;
  double expert_follow = 0.5;
  /// Index of the first (profile, dialogue) pair to run, for resuming.
  std::size_t resume_from = 0;
};

struct CorpusBuild {
  PretrainCorpus corpus;
  /// Set when an episode failed; rerun with resume_from = *resume_token.
  std::optional<std::size_t> resume_token;
  std::string error;
};

CorpusOptions default_corpus_options(Task task, const std::vector<std::string>& situations);

/// Self-play with the persona-agnostic expert policy over `profiles`.
CorpusBuild build_pretrain_corpus(std::span<const UserProfile* const> profiles, const StrategySet& strategies,
                                  const ActorFactory& actors, const EpisodeConfig& episode, std::uint64_t seed,
                                  const CorpusOptions& options);

/// Labels each system turn with a strategy id.
class StrategyAnnotator {
 public:
  virtual ~StrategyAnnotator() = default;
  virtual std::string annotate(const Transcript& transcript, std::size_t turn) = 0;
};

/// Records the strategy the policy actually chose.
class LoggedStrategyAnnotator final : public StrategyAnnotator {
 public:
  std::string annotate(const Transcript& transcript, std::size_t turn) override;
};

/// Asks a chat model to classify each system utterance.
class LlmStrategyAnnotator final : public StrategyAnnotator {
 public:
  LlmStrategyAnnotator(ChatModel& model, const StrategySet& strategies, std::string prompt_template);
  std::string annotate(const Transcript& transcript, std::size_t turn) override;

 private:
  ChatModel& model_;
  const StrategySet& strategies_;
  std::string prompt_;
};

/// Rewrites every turn's strategy from the annotator; labels outside the set
/// raise an annotation error.
void annotate_strategies(Transcript& transcript, StrategyAnnotator& annotator, const StrategySet& strategies);

/// `{root}/{task}/{stage}/{step}.ckpt`, with `best` naming the kept step.
class CheckpointStore {
 public:
  explicit CheckpointStore(std::filesystem::path root) : root_(std::move(root)) {}

  std::filesystem::path stage_dir(Task task, const std::string& stage) const;
  /// Writes the checkpoint, marks it best and removes the previous best.
  std::filesystem::path save_best(Task task, const std::string& stage, long step, const nn::Checkpoint& ckpt) const;
  bool has(Task task, const std::string& stage) const;
  nn::Checkpoint load_best(Task task, const std::string& stage) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

struct PretrainOptions {
  int steps = 2000;
  int batch = 64;
  double lr = 1e-4;
  double clip = 1.0;
  int eval_every = 250;
  std::uint64_t seed = 1;
  /// Stops early once exceeded; <= 0 disables.
  double time_budget_seconds = 0.0;
  std::string config_hash;
};

struct StageReport {
  std::string stage;
  long best_step = 0;
  double best_metric = 0.0;
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  nlohmann::ordered_json final_metrics = nlohmann::ordered_json::object();
  std::filesystem::path checkpoint;
  double seconds = 0.0;
};

struct PortrayerEval {
  /// Mean argmax accuracy over every (dialogue, turn) pair.
  double accuracy = 0.0;
  /// Accuracy of the prediction after the dialogue's last reply.
  double final_accuracy = 0.0;
  /// Accuracy after reply t (index t-1), over dialogues that reach turn t.
  std::vector<double> by_turn;
  std::vector<int> counts;
};

PortrayerEval evaluate_portrayer(const UdpStack& stack, std::span<const Transcript> dialogues);

struct AnticipatorEval {
  double loss = 0.0;
  /// In-batch top-1 retrieval of the golden state.
  double top1 = 0.0;
  int batches = 0;
};

std::vector<AnticipatorExample> anticipator_examples(const UdpStack& stack, std::span<const Transcript> dialogues);
AnticipatorEval evaluate_anticipator(UdpStack& stack, std::span<const AnticipatorExample> examples, int batch,
                                     std::uint64_t seed);

std::vector<PlanningRecord> planner_records(const UdpStack& stack, std::span<const Transcript> dialogues);
/// Mean NLL and argmax accuracy of gold strategies.
std::pair<double, double> evaluate_planner(UdpStack& stack, std::span<const PlanningRecord> records);

/// Trains one stage on `train`, keeps the best validation checkpoint in memory
/// (and in `store` when given) and restores it before returning.
StageReport pretrain_stage(const std::string& stage, UdpStack& stack, const PretrainCorpus& train,
                           const PretrainCorpus& valid, const PretrainOptions& options,
                           const CheckpointStore* store = nullptr);

/// Stage parameters by name: "portrayer", "anticipator" or "planner".
nn::ParameterList stage_parameters(UdpStack& stack, const std::string& stage);
nn::Checkpoint stage_checkpoint(UdpStack& stack, const std::string& stage, long step, nlohmann::json meta);
/// Restores a stage, checking that the checkpoint matches this stack's
/// persona bank, strategy set and schedule.
void restore_stage(UdpStack& stack, const std::string& stage, const nn::Checkpoint& ckpt);

struct SamplerOptions {
  double beta = 1.0;
  double initial_weight = 1.0;
  /// Probability proportional to max(w, floor) instead of softmax(-beta w).
  bool as_written_proportional = false;
  double floor = 1e-3;
};

/// Per-persona success-minus-failure weights and the sampling transform.
class ActiveSampler {
 public:
  ActiveSampler(int personas, SamplerOptions options);

  void update(int persona, bool success);
  std::vector<double> probabilities() const;
  int sample(Rng& rng) const;
  const std::vector<double>& weights() const { return weights_; }
  const SamplerOptions& options() const { return options_; }

 private:
  std::vector<double> weights_;
  SamplerOptions options_;
};

struct RlOptions {
  int episodes = 300;
  double lr = 1e-5;
  double clip = 1.0;
  double gamma = 0.95;
  /// Use gamma^(t'-t) instead of gamma^(T-t').
  bool reward_to_go = false;
  int eval_every = 50;
  int eval_repeats = 1;
  double max_failure_rate = 0.1;
  SamplerOptions sampler;
  std::uint64_t seed = 1;
  std::string config_hash;
  int threads = 1;
};

struct RlReport {
  int episodes = 0;
  int failed_episodes = 0;
  int successes = 0;
  double best_valid_ssr = 0.0;
  long best_episode = 0;
  std::vector<double> sampler_weights;
  std::vector<double> sampler_probabilities;
  std::string frozen_hash_before;
  std::string frozen_hash_after;
  double frozen_grad_norm = 0.0;
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  std::filesystem::path checkpoint;
  double seconds = 0.0;
};

/// Combined hash of the portrayer and anticipator parameters.
std::string frozen_hash(UdpStack& stack);

/// Active-sampling policy-gradient training of the planner only.
RlReport rl_train(UdpStack& stack, const ProfileSet& profiles, const ActorFactory& actors,
                  const EpisodeConfig& episode, const std::vector<std::string>& situations, const RlOptions& options,
                  const CheckpointStore* store = nullptr);

/// Greedy UDP episodes over a split (`repeats` per profile).
std::vector<Transcript> simulate_agent(const UdpStack& stack, std::span<const UserProfile* const> profiles,
                                       const ActorFactory& actors, const EpisodeConfig& episode,
                                       const std::vector<std::string>& situations, std::uint64_t seed, int repeats,
                                       UdpAgent::Mode mode = UdpAgent::Mode::kGreedy, int threads = 1);

/// Episodes under an arbitrary per-episode policy.
std::vector<Transcript> simulate_policy(const std::function<std::unique_ptr<Policy>()>& make_policy,
                                        std::span<const UserProfile* const> profiles, const StrategySet& strategies,
                                        const ActorFactory& actors, const EpisodeConfig& episode,
                                        const std::vector<std::string>& situations, std::uint64_t seed, int repeats,
                                        int threads = 1);

}  // namespace udp
