#include "udp/scripted.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "udp/error.hpp"

namespace udp {
namespace {

using nlohmann::json;

const std::string& pick(const std::vector<std::string>& options, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return options[d(rng)];
}

std::string replace_all(std::string s, std::string_view key, std::string_view value) {
  for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
    s.replace(pos, key.size(), value);
  }
  return s;
}

std::vector<Band> parse_bands(const json& j, const char* what) {
  std::vector<Band> out;
  for (const auto& b : j) {
    Band band;
    band.label = b.at("label").get<std::string>();
    band.below = b.contains("below") ? b.at("below").get<double>() : std::numeric_limits<double>::infinity();
    out.push_back(band);
  }
  require(!out.empty(), ErrorKind::kConfiguration, std::string(what) + " needs at least one band");
  for (std::size_t i = 1; i < out.size(); ++i) {
    require(out[i].below > out[i - 1].below, ErrorKind::kConfiguration, std::string(what) + " bounds must increase");
  }
  require(std::isinf(out.back().below), ErrorKind::kConfiguration, std::string(what) + ": last band must be open");
  return out;
}

class ScriptedSystem final : public SystemActor {
 public:
  explicit ScriptedSystem(const ScriptedWorld& world) : world_(world) {}
  void begin(const DialogueContext&, std::uint64_t seed) override { rng_.seed(seed); }
  std::string respond(const DialogueContext&, int strategy) override { return world_.system_utterance(strategy, rng_); }

 private:
  const ScriptedWorld& world_;
  Rng rng_;
};

class ScriptedUser final : public UserActor {
 public:
  ScriptedUser(const ScriptedWorld& world, std::shared_ptr<ScriptedUserState> state)
      : world_(world), state_(std::move(state)) {}
  void begin(const UserProfile& profile, const DialogueContext&, std::uint64_t seed) override {
    rng_.seed(seed);
    state_->persona = profile.persona;
    state_->inclination = world_.start_inclination(profile.persona);
    state_->turn = 0;
  }
  std::string respond(const DialogueContext& ctx, const std::string&, int strategy) override {
    ScriptedStep step = world_.user_step(*state_, strategy, rng_);
    *state_ = step.state;
    const auto& tmpl = world_.config().situation_template;
    if (state_->turn == 1 && !ctx.situation.empty() && !tmpl.empty()) {
      return replace_all(tmpl, "{situation}", ctx.situation) + " " + step.utterance;
    }
    return step.utterance;
  }

 private:
  const ScriptedWorld& world_;
  std::shared_ptr<ScriptedUserState> state_;
  Rng rng_;
};

class ScriptedCritic final : public Critic {
 public:
  ScriptedCritic(const ScriptedWorld& world, std::shared_ptr<const ScriptedUserState> state, int samples,
                 double temperature)
      : world_(world), state_(std::move(state)), samples_(samples), temperature_(temperature) {}
  void begin(const UserProfile&, const DialogueContext&, std::uint64_t seed) override { rng_.seed(seed); }
  std::vector<std::string> judge(const DialogueContext&) override {
    return world_.critic_labels(state_->inclination, samples_, temperature_, rng_);
  }

 private:
  const ScriptedWorld& world_;
  std::shared_ptr<const ScriptedUserState> state_;
  int samples_;
  double temperature_;
  Rng rng_;
};

}  // namespace

std::string band_label(const std::vector<Band>& bands, double value) {
  for (const auto& b : bands) {
    if (value < b.below) return b.label;
  }
  return bands.back().label;
}

ScriptedConfig parse_scripted_config(const json& j, Task task) {
  ScriptedConfig c;
  c.task = task;
  try {
    require(parse_task(j.at("task").get<std::string>()) == task, ErrorKind::kConfiguration,
            "scripted config is for a different task");
    c.base_inclination = j.at("base_inclination").get<double>();
    c.hard_offset = j.value("hard_offset", 0.0);
    c.noise = j.at("noise").get<double>();
    c.critic_noise = j.at("critic_noise").get<double>();
    c.base_affinity = j.at("base_affinity").get<double>();
    c.trait_affinity = j.at("trait_affinity").get<std::map<std::string, std::map<std::string, double>>>();
    c.critic_bands = parse_bands(j.at("critic_bands"), "critic_bands");
    c.mood_bands = parse_bands(j.at("mood_bands"), "mood_bands");
    c.mood_lines = j.at("mood_lines").get<std::map<std::string, std::vector<std::string>>>();
    c.trait_lines = j.at("trait_lines").get<std::map<std::string, std::vector<std::string>>>();
    c.strategy_topics = j.at("strategy_topics").get<std::map<std::string, std::string>>();
    c.liked_templates = j.at("liked_templates").get<std::vector<std::string>>();
    c.disliked_templates = j.at("disliked_templates").get<std::vector<std::string>>();
    c.system_lines = j.at("system_lines").get<std::map<std::string, std::vector<std::string>>>();
    c.situation_template = j.value("situation_template", std::string());
    c.situations = j.value("situations", std::vector<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfiguration, std::string("scripted config: ") + e.what());
  }
  require(c.noise >= 0 && c.critic_noise >= 0, ErrorKind::kConfiguration, "scripted noise must be non-negative");
  require(!c.liked_templates.empty() && !c.disliked_templates.empty(), ErrorKind::kConfiguration,
          "scripted config needs reaction templates");
  for (const auto& b : c.critic_bands) map_option(b.label, task);
  for (const auto& b : c.mood_bands) {
    require(c.mood_lines.count(b.label) && !c.mood_lines.at(b.label).empty(), ErrorKind::kConfiguration,
            "no mood lines for band '" + b.label + "'");
  }
  for (const auto& [trait, lines] : c.trait_lines) {
    require(!lines.empty(), ErrorKind::kConfiguration, "no lines for trait '" + trait + "'");
    for (const auto& l : lines) {
      require(l.find(trait) != std::string::npos, ErrorKind::kConfiguration,
              "trait line lacks its keyword '" + trait + "': " + l);
    }
  }
  return c;
}

ScriptedConfig load_scripted_config(const std::filesystem::path& path, Task task) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  return parse_scripted_config(j, task);
}

ScriptedConfig default_scripted_config(Task task) {
  const char* file = task == Task::kP4G ? "p4g.json" : "esconv.json";
  return load_scripted_config(data_dir() / "scripted" / file, task);
}

ScriptedWorld::ScriptedWorld(ScriptedConfig config, StrategySet strategies)
    : config_(std::move(config)), strategies_(std::move(strategies)) {
  require(strategies_.task() == config_.task, ErrorKind::kConfiguration, "scripted world task mismatch");
  const int M = persona_count(config_.task);
  const int K = strategies_.size();
  for (const auto& s : strategies_.items()) {
    require(config_.strategy_topics.count(s.id) != 0, ErrorKind::kConfiguration, "no topic for strategy " + s.id);
    require(config_.system_lines.count(s.id) != 0 && !config_.system_lines.at(s.id).empty(),
            ErrorKind::kConfiguration, "no system lines for strategy " + s.id);
  }
  for (const auto& [trait, row] : config_.trait_affinity) {
    for (const auto& [id, v] : row) {
      require(strategies_.contains(id), ErrorKind::kConfiguration, "affinity for unknown strategy " + id);
      require(std::isfinite(v), ErrorKind::kConfiguration, "affinities must be finite");
    }
  }
  affinity_ = Eigen::MatrixXd::Constant(M, K, config_.base_affinity);
  for (const Persona& p : enumerate_personas(config_.task)) {
    for (const auto& label : p.trait_labels()) {
      require(config_.trait_lines.count(label) != 0, ErrorKind::kConfiguration, "no trait lines for " + label);
      auto it = config_.trait_affinity.find(label);
      if (it == config_.trait_affinity.end()) continue;
      for (const auto& [id, v] : it->second) affinity_(p.index, strategies_.index_of(id)) += v;
    }
  }
}

double ScriptedWorld::start_inclination(const Persona& persona) const {
  const bool hard = persona.difficulty && *persona.difficulty == Difficulty::kHard;
  return config_.base_inclination + (hard ? config_.hard_offset : 0.0);
}

std::string ScriptedWorld::mood_of(double inclination) const {
  return band_label(config_.mood_bands, inclination);
}

ScriptedStep ScriptedWorld::user_step(const ScriptedUserState& state, int strategy, Rng& rng,
                                      double noise_scale) const {
  const Strategy& s = strategies_.at(strategy);
  std::normal_distribution<double> normal(0.0, config_.noise * noise_scale);
  const double delta = affinity_(state.persona.index, strategy) + (config_.noise * noise_scale > 0 ? normal(rng) : 0.0);
  ScriptedStep out;
  out.state = state;
  out.state.inclination = std::clamp(state.inclination + delta, -2.0, 2.0);
  out.state.turn = state.turn + 1;

  const auto labels = state.persona.trait_labels();
  std::uniform_int_distribution<std::size_t> dim(0, labels.size() - 1);
  const std::string& trait_line = pick(config_.trait_lines.at(labels[dim(rng)]), rng);
  const auto& templates = delta >= 0 ? config_.liked_templates : config_.disliked_templates;
  const std::string reaction = replace_all(pick(templates, rng), "{topic}", config_.strategy_topics.at(s.id));
  const std::string& mood = pick(config_.mood_lines.at(mood_of(out.state.inclination)), rng);
  out.utterance = trait_line + " " + reaction + " " + mood;
  return out;
}

std::vector<std::string> ScriptedWorld::critic_labels(double inclination, int samples, double temperature,
                                                      Rng& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(samples));
  const double sd = config_.critic_noise * temperature;
  for (int k = 0; k < samples; ++k) out.push_back(band_label(config_.critic_bands, inclination + sd * normal(rng)));
  return out;
}

std::string ScriptedWorld::system_utterance(int strategy, Rng& rng) const {
  return pick(config_.system_lines.at(strategies_.at(strategy).id), rng);
}

ActorSet ScriptedWorld::make_actors(const CriticConfig& critic) const {
  auto state = std::make_shared<ScriptedUserState>();
  ActorSet set;
  set.system = std::make_unique<ScriptedSystem>(*this);
  set.user = std::make_unique<ScriptedUser>(*this, state);
  set.critic = std::make_unique<ScriptedCritic>(*this, state, critic.samples, critic.temperature);
  set.backend = "scripted";
  return set;
}

}  // namespace udp
