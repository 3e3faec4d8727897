#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "udp/harness.hpp"
#include "udp/util.hpp"

namespace udp {

/// Upper-bounded band: values below `below` (and above the previous band) get `label`.
struct Band {
  double below = 0.0;
  std::string label;
};

/// Offline persona simulator settings, one file per task.
struct ScriptedConfig {
  Task task = Task::kP4G;
  double base_inclination = 0.0;
  /// Added to the starting inclination of hard personas.
  double hard_offset = 0.0;
  double noise = 0.05;
  /// Std-dev of the critic's per-sample jitter at temperature 1.
  double critic_noise = 0.15;
  double base_affinity = -0.05;
  /// trait label -> strategy id -> affinity contribution.
  std::map<std::string, std::map<std::string, double>> trait_affinity;
  /// Critic option bands over the noisy inclination; the last band is open-ended.
  std::vector<Band> critic_bands;
  /// Mood bands used to pick the user's reaction line.
  std::vector<Band> mood_bands;
  std::map<std::string, std::vector<std::string>> mood_lines;
  /// Keyed by trait label; every line contains the label.
  std::map<std::string, std::vector<std::string>> trait_lines;
  std::map<std::string, std::string> strategy_topics;
  std::vector<std::string> liked_templates;
  std::vector<std::string> disliked_templates;
  std::map<std::string, std::vector<std::string>> system_lines;
  std::string situation_template;
  std::vector<std::string> situations;
};

ScriptedConfig parse_scripted_config(const nlohmann::json& j, Task task);
ScriptedConfig load_scripted_config(const std::filesystem::path& path, Task task);
ScriptedConfig default_scripted_config(Task task);

/// Hidden state of one simulated user.
struct ScriptedUserState {
  Persona persona;
  double inclination = 0.0;
  int turn = 0;
};

struct ScriptedStep {
  std::string utterance;
  ScriptedUserState state;
};

class ScriptedWorld {
 public:
  ScriptedWorld(ScriptedConfig config, StrategySet strategies);

  const ScriptedConfig& config() const { return config_; }
  const StrategySet& strategies() const { return strategies_; }
  /// Per-turn inclination drift for a persona under a strategy.
  double affinity(int persona, int strategy) const { return affinity_(persona, strategy); }
  const Eigen::MatrixXd& affinities() const { return affinity_; }
  double start_inclination(const Persona& persona) const;

  /// inclination += affinity + noise; the reply names a persona trait, reacts
  /// to the strategy and reflects the new mood band.
  ScriptedStep user_step(const ScriptedUserState& state, int strategy, Rng& rng, double noise_scale = 1.0) const;
  std::vector<std::string> critic_labels(double inclination, int samples, double temperature, Rng& rng) const;
  std::string system_utterance(int strategy, Rng& rng) const;
  std::string mood_of(double inclination) const;

  /// Fresh system/user/critic triple sharing one hidden user state.
  ActorSet make_actors(const CriticConfig& critic) const;

 private:
  ScriptedConfig config_;
  StrategySet strategies_;
  Eigen::MatrixXd affinity_;
};

/// Label of the first band whose bound exceeds `value`; the last band catches the rest.
std::string band_label(const std::vector<Band>& bands, double value);

}  // namespace udp
