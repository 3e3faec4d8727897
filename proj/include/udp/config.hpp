#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "udp/agent.hpp"
#include "udp/encoder.hpp"
#include "udp/harness.hpp"
#include "udp/llm.hpp"
#include "udp/persona.hpp"
#include "udp/trainer.hpp"

namespace udp {

struct PathsConfig {
  /// Everything else defaults to a location under this directory.
  std::filesystem::path root = "runs";
  std::filesystem::path profiles;
  std::filesystem::path strategies;
  std::filesystem::path scripted;
  std::filesystem::path prompts;
  std::filesystem::path corpus;
  std::filesystem::path checkpoints;
  std::filesystem::path transcripts;
  std::filesystem::path reports;
};

struct ProfilesConfig {
  ProfileBackend backend = ProfileBackend::kTemplate;
  SplitQuota quota;
};

struct CorpusConfig {
  /// 0 picks the task default (2 for P4G, one per situation for ESConv).
  int dialogues_per_profile = 0;
  double expert_follow = 0.5;
};

struct SimulateConfig {
  Split split = Split::kTest;
  int episodes_per_profile = 1;
  /// "udp", "markov-expert" or "uniform".
  std::string policy = "udp";
  /// Planner checkpoint stage to load for the udp policy: "rl" or "planner".
  std::string planner_stage = "rl";
};

struct LlmConfig {
  EndpointConfig endpoint;
  /// Replay completions from this JSONL file instead of calling the endpoint.
  std::filesystem::path fixture;
  /// Append live completions to this JSONL file.
  std::filesystem::path record;
};

/// Fully resolved run configuration.
struct RunConfig {
  Task task = Task::kP4G;
  std::uint64_t seed = 1;
  /// "scripted" or "llm".
  std::string backend = "scripted";
  int threads = 1;
  PathsConfig paths;
  EncoderConfig encoder;
  StackConfig stack;
  CriticConfig critic;
  ProfilesConfig profiles;
  CorpusConfig corpus;
  PretrainOptions pretrain_portrayer;
  PretrainOptions pretrain_anticipator;
  PretrainOptions pretrain_planner;
  RlOptions rl;
  SimulateConfig simulate;
  LlmConfig llm;

  PretrainOptions& pretrain(const std::string& stage);
  const PretrainOptions& pretrain(const std::string& stage) const;
};

/// JSON parse that rejects duplicate object keys.
nlohmann::json parse_json_strict(std::string_view text, std::string_view source = "<memory>");

/// Task defaults for every field.
RunConfig default_run_config(Task task);

/// Applies a config document over the task defaults. Unknown keys and type
/// errors are collected and reported together as one configuration error.
RunConfig resolve_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fills derived paths from `paths.root` and checks cross-field invariants.
void finalize_run_config(RunConfig& config);

/// Effective configuration; round-trips through resolve_run_config.
nlohmann::ordered_json to_json(const RunConfig& config);
/// Hash of the effective configuration.
std::string config_hash(const RunConfig& config);

}  // namespace udp
