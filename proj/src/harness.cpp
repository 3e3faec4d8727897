#include "udp/harness.hpp"

#include <cmath>

#include "udp/util.hpp"

namespace udp {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

struct OptionValue {
  const char* label;
  double value;
};

constexpr OptionValue kP4GOptions[] = {{"refused", -1.0}, {"neutral", -0.5}, {"positive", 0.1}, {"agree", 1.0}};
constexpr OptionValue kESConvOptions[] = {
    {"worse", -1.0}, {"same", -0.5}, {"better", 0.1}, {"accepted", 1.0}, {"solved", 1.0}};

std::span<const OptionValue> options_of(Task task) {
  if (task == Task::kP4G) return kP4GOptions;
  return kESConvOptions;
}

}  // namespace

const std::vector<std::string>& option_vocabulary(Task task) {
  static const std::vector<std::string> p4g = {"refused", "neutral", "positive", "agree"};
  static const std::vector<std::string> esconv = {"worse", "same", "better", "accepted", "solved"};
  return task == Task::kP4G ? p4g : esconv;
}

double map_option(std::string_view label, Task task) {
  for (const auto& o : options_of(task)) {
    if (label == o.label) return o.value;
  }
  fail(ErrorKind::kVocabulary, "'" + std::string(label) + "' is not a " + std::string(to_string(task)) + " critic option");
}

double critic_score(std::span<const std::string> labels, const CriticConfig& config) {
  if (static_cast<int>(labels.size()) != config.samples) {
    fail(ErrorKind::kProtocol, "critic returned " + std::to_string(labels.size()) + " options, expected " +
                                   std::to_string(config.samples));
  }
  double sum = 0.0;
  for (const auto& l : labels) sum += map_option(l, config.task);
  return sum / static_cast<double>(labels.size());
}

bool is_success(double reward, const CriticConfig& config) {
  return config.strict ? reward > config.threshold : reward >= config.threshold;
}

std::string_view system_role_name(Task task) {
  return task == Task::kP4G ? "Persuader" : "Supporter";
}

std::string_view user_role_name(Task task) {
  return task == Task::kP4G ? "Persuadee" : "Seeker";
}

std::vector<std::string> DialogueContext::history_lines() const {
  std::vector<std::string> out;
  out.reserve(turns.size() * 2);
  for (const auto& t : turns) {
    out.push_back(std::string(system_role_name(task)) + ": " + t.system_utterance);
    out.push_back(std::string(user_role_name(task)) + ": " + t.user_utterance);
  }
  return out;
}

std::vector<std::string> DialogueContext::user_utterances() const {
  std::vector<std::string> out;
  out.reserve(turns.size());
  for (const auto& t : turns) out.push_back(t.user_utterance);
  return out;
}

ordered_json to_json(const Transcript& t) {
  ordered_json turns = ordered_json::array();
  for (const auto& turn : t.turns) {
    ordered_json j;
    j["turn"] = turn.turn;
    j["strategy"] = turn.strategy;
    j["strategy_index"] = turn.strategy_index;
    j["system"] = turn.system_utterance;
    j["user"] = turn.user_utterance;
    j["reward"] = turn.reward;
    j["critic_labels"] = turn.critic_labels;
    if (turn.predicted_persona) j["predicted_persona"] = *turn.predicted_persona;
    turns.push_back(std::move(j));
  }
  ordered_json j;
  j["schema_version"] = t.schema_version;
  j["profile_id"] = t.profile_id;
  j["task"] = std::string(to_string(t.task));
  j["persona_index"] = t.persona_index;
  j["situation"] = t.situation;
  j["seed"] = t.seed;
  j["backend"] = t.backend;
  j["policy"] = t.policy;
  j["outcome"] = t.success ? "success" : "fail";
  j["final_reward"] = t.final_reward;
  j["complete"] = t.complete;
  j["turns"] = std::move(turns);
  return j;
}

Transcript transcript_from_json(const json& j) {
  Transcript t;
  t.schema_version = j.at("schema_version").get<int>();
  if (t.schema_version != kTranscriptSchemaVersion) {
    fail(ErrorKind::kParse, "unsupported transcript schema version " + std::to_string(t.schema_version));
  }
  t.profile_id = j.at("profile_id").get<std::string>();
  t.task = parse_task(j.at("task").get<std::string>());
  t.persona_index = j.at("persona_index").get<int>();
  require(t.persona_index >= 0 && t.persona_index < persona_count(t.task), ErrorKind::kParse,
          "persona_index out of range");
  t.situation = j.value("situation", std::string());
  t.seed = j.at("seed").get<std::uint64_t>();
  t.backend = j.at("backend").get<std::string>();
  t.policy = j.value("policy", std::string());
  const std::string outcome = j.at("outcome").get<std::string>();
  require(outcome == "success" || outcome == "fail", ErrorKind::kParse, "outcome must be success or fail");
  t.success = outcome == "success";
  t.final_reward = j.at("final_reward").get<double>();
  t.complete = j.value("complete", true);
  for (const auto& tj : j.at("turns")) {
    DialogueTurn turn;
    turn.turn = tj.at("turn").get<int>();
    turn.strategy = tj.at("strategy").get<std::string>();
    turn.strategy_index = tj.at("strategy_index").get<int>();
    turn.system_utterance = tj.at("system").get<std::string>();
    turn.user_utterance = tj.at("user").get<std::string>();
    turn.reward = tj.at("reward").get<double>();
    turn.critic_labels = tj.at("critic_labels").get<std::vector<std::string>>();
    if (tj.contains("predicted_persona")) turn.predicted_persona = tj.at("predicted_persona").get<int>();
    t.turns.push_back(std::move(turn));
  }
  return t;
}

std::string to_jsonl(std::span<const Transcript> transcripts) {
  std::string out;
  for (const auto& t : transcripts) {
    out += to_json(t).dump();
    out += '\n';
  }
  return out;
}

std::vector<Transcript> parse_transcripts(std::string_view jsonl, std::string_view source) {
  std::vector<Transcript> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < jsonl.size()) {
    std::size_t end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    const std::string_view line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    try {
      out.push_back(transcript_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, where + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::kParse, where + ": " + e.what());
    }
  }
  return out;
}

void save_transcripts(std::span<const Transcript> transcripts, const std::filesystem::path& path) {
  write_file(path, to_jsonl(transcripts));
}

std::vector<Transcript> load_transcripts(const std::filesystem::path& path) {
  return parse_transcripts(read_file(path), path.string());
}

std::string transcripts_hash(std::span<const Transcript> transcripts) {
  return hash_hex(to_jsonl(transcripts));
}

void validate_transcript(const Transcript& t, const CriticConfig& critic, int max_turns) {
  const std::string who = "transcript " + t.profile_id + ": ";
  require(!t.turns.empty(), ErrorKind::kInvariant, who + "has no turns");
  require(t.length() <= max_turns, ErrorKind::kInvariant, who + "exceeds the turn cap");
  for (std::size_t k = 0; k < t.turns.size(); ++k) {
    const DialogueTurn& turn = t.turns[k];
    require(turn.turn == static_cast<int>(k) + 1, ErrorKind::kInvariant, who + "turn numbering is not consecutive");
    require(std::abs(critic_score(turn.critic_labels, critic) - turn.reward) < 1e-12, ErrorKind::kInvariant,
            who + "reward is not the critic mean");
    const bool last = k + 1 == t.turns.size();
    if (!last) require(!is_success(turn.reward, critic), ErrorKind::kInvariant, who + "continued after success");
  }
  const double last = t.turns.back().reward;
  require(t.final_reward == last, ErrorKind::kInvariant, who + "final reward differs from the last turn");
  require(t.success == is_success(last, critic), ErrorKind::kInvariant, who + "outcome disagrees with the threshold");
  if (!t.success && t.complete) {
    require(t.length() == max_turns, ErrorKind::kInvariant, who + "failed before the turn cap");
  }
}

Transcript run_episode(Policy& policy, const UserProfile& profile, ActorSet& actors, const StrategySet& strategies,
                       const EpisodeConfig& config, std::uint64_t seed, const std::string& situation) {
  require(actors.system && actors.user && actors.critic, ErrorKind::kConfiguration, "incomplete actor set");
  require(config.max_turns >= 1, ErrorKind::kConfiguration, "max_turns must be positive");
  require(config.critic.task == profile.persona.task && strategies.task() == profile.persona.task,
          ErrorKind::kConfiguration, "task mismatch between profile, critic and strategies");
  DialogueContext ctx;
  ctx.task = profile.persona.task;
  ctx.strategies = &strategies;
  ctx.situation = situation;
  ctx.max_turns = config.max_turns;

  Transcript tr;
  tr.profile_id = profile.profile_id;
  tr.task = profile.persona.task;
  tr.persona_index = profile.persona.index;
  tr.situation = situation;
  tr.seed = seed;
  tr.backend = actors.backend;
  tr.policy = policy.name();

  auto finish = [&]() {
    tr.final_reward = tr.turns.empty() ? 0.0 : tr.turns.back().reward;
    tr.success = !tr.turns.empty() && is_success(tr.final_reward, config.critic);
  };

  try {
    policy.begin(ctx, derive_seed(seed, "policy"));
    actors.system->begin(ctx, derive_seed(seed, "system"));
    actors.user->begin(profile, ctx, derive_seed(seed, "user"));
    actors.critic->begin(profile, ctx, derive_seed(seed, "critic"));
    for (int t = 1; t <= config.max_turns; ++t) {
      const Decision d = policy.choose(ctx);
      const Strategy& s = strategies.at(d.strategy);
      DialogueTurn turn;
      turn.turn = t;
      turn.strategy = s.id;
      turn.strategy_index = d.strategy;
      turn.predicted_persona = d.predicted_persona;
      turn.system_utterance = actors.system->respond(ctx, d.strategy);
      turn.user_utterance = actors.user->respond(ctx, turn.system_utterance, d.strategy);
      ctx.turns.push_back(turn);
      turn.critic_labels = actors.critic->judge(ctx);
      turn.reward = critic_score(turn.critic_labels, config.critic);
      ctx.turns.back() = turn;
      tr.turns.push_back(turn);
      if (is_success(turn.reward, config.critic)) break;
    }
  } catch (const EpisodeError&) {
    throw;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kTransport && e.kind() != ErrorKind::kProtocol) throw;
    tr.complete = false;
    finish();
    throw EpisodeError(std::string("episode aborted at turn ") + std::to_string(tr.length() + 1) + ": " + e.what(),
                       std::move(tr));
  }
  finish();
  return tr;
}

}  // namespace udp
