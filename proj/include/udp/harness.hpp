#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "udp/error.hpp"
#include "udp/persona.hpp"
#include "udp/strategy.hpp"

namespace udp {

inline constexpr int kTranscriptSchemaVersion = 1;

struct CriticConfig {
  Task task = Task::kP4G;
  int samples = 10;
  double temperature = 1.1;
  double threshold = 0.6;
  /// Success needs r > threshold; false switches to r >= threshold.
  bool strict = true;
};

/// Closed option vocabulary of the task's critic question.
const std::vector<std::string>& option_vocabulary(Task task);
double map_option(std::string_view label, Task task);
/// Mean mapped value of exactly `config.samples` labels.
double critic_score(std::span<const std::string> labels, const CriticConfig& config);
bool is_success(double reward, const CriticConfig& config);

struct DialogueTurn {
  int turn = 0;
  std::string strategy;
  int strategy_index = -1;
  std::string system_utterance;
  std::string user_utterance;
  double reward = 0.0;
  std::vector<std::string> critic_labels;
  /// Portrayer argmax available when the strategy was chosen.
  std::optional<int> predicted_persona;
};

struct Transcript {
  int schema_version = kTranscriptSchemaVersion;
  std::string profile_id;
  Task task = Task::kP4G;
  int persona_index = 0;
  std::string situation;
  std::vector<DialogueTurn> turns;
  bool success = false;
  double final_reward = 0.0;
  std::uint64_t seed = 0;
  std::string backend;
  std::string policy;
  /// False when the episode was cut short by an error.
  bool complete = true;

  int length() const { return static_cast<int>(turns.size()); }
};

nlohmann::ordered_json to_json(const Transcript& t);
Transcript transcript_from_json(const nlohmann::json& j);
std::string to_jsonl(std::span<const Transcript> transcripts);
std::vector<Transcript> parse_transcripts(std::string_view jsonl, std::string_view source = "<memory>");
void save_transcripts(std::span<const Transcript> transcripts, const std::filesystem::path& path);
std::vector<Transcript> load_transcripts(const std::filesystem::path& path);
/// Content hash of the serialized transcripts.
std::string transcripts_hash(std::span<const Transcript> transcripts);

/// Protocol checks: turn numbering, reward/label consistency, early stop on
/// success and the turn cap. Throws an invariant error on violation.
void validate_transcript(const Transcript& t, const CriticConfig& critic, int max_turns);

/// Dialogue so far, as seen by actors and policies.
struct DialogueContext {
  Task task = Task::kP4G;
  const StrategySet* strategies = nullptr;
  std::string situation;
  int max_turns = 10;
  std::vector<DialogueTurn> turns;

  int next_turn() const { return static_cast<int>(turns.size()) + 1; }
  /// "Persuader: ..." / "Persuadee: ..." (or Supporter/Seeker) lines.
  std::vector<std::string> history_lines() const;
  std::vector<std::string> user_utterances() const;
};

std::string_view system_role_name(Task task);
std::string_view user_role_name(Task task);

class SystemActor {
 public:
  virtual ~SystemActor() = default;
  virtual void begin(const DialogueContext& ctx, std::uint64_t seed) = 0;
  virtual std::string respond(const DialogueContext& ctx, int strategy) = 0;
};

class UserActor {
 public:
  virtual ~UserActor() = default;
  virtual void begin(const UserProfile& profile, const DialogueContext& ctx, std::uint64_t seed) = 0;
  virtual std::string respond(const DialogueContext& ctx, const std::string& system_utterance, int strategy) = 0;
};

class Critic {
 public:
  virtual ~Critic() = default;
  virtual void begin(const UserProfile& profile, const DialogueContext& ctx, std::uint64_t seed) = 0;
  /// Option labels for the state after the latest turn in `ctx`.
  virtual std::vector<std::string> judge(const DialogueContext& ctx) = 0;
};

struct ActorSet {
  std::unique_ptr<SystemActor> system;
  std::unique_ptr<UserActor> user;
  std::unique_ptr<Critic> critic;
  std::string backend;
};

struct Decision {
  int strategy = 0;
  std::optional<int> predicted_persona;
};

/// Maps the dialogue so far to the next strategy. One instance per episode.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void begin(const DialogueContext& ctx, std::uint64_t seed) = 0;
  virtual Decision choose(const DialogueContext& ctx) = 0;
  virtual std::string name() const = 0;
};

struct EpisodeConfig {
  CriticConfig critic;
  int max_turns = 10;
};

/// Raised when an actor fails mid-episode; carries the turns completed so far.
class EpisodeError : public Error {
 public:
  EpisodeError(const std::string& message, Transcript partial)
      : Error(ErrorKind::kEpisode, message), partial_(std::move(partial)) {}
  const Transcript& partial() const { return partial_; }

 private:
  Transcript partial_;
};

Transcript run_episode(Policy& policy, const UserProfile& profile, ActorSet& actors, const StrategySet& strategies,
                       const EpisodeConfig& config, std::uint64_t seed, const std::string& situation = {});

}  // namespace udp
