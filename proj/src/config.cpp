#include "udp/config.hpp"

#include <functional>
#include <set>
#include <vector>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

/// Reads fields out of a JSON document, recording every problem.
class Reader {
 public:
  Reader(const json& root, std::vector<std::string>& errors) : errors_(errors) { frames_.push_back({&root, "", {}}); }

  template <typename T>
  void field(const char* key, T& out) {
    const json* v = lookup(key);
    if (v == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) return error(key, "expected a boolean");
      out = v->get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v->is_number_unsigned()) return error(key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) return error(key, "expected an integer");
      out = v->get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) return error(key, "expected a number");
      out = v->get<T>();
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
      if (!v->is_string()) return error(key, "expected a path string");
      out = v->get<std::string>();
    } else {
      if (!v->is_string()) return error(key, "expected a string");
      out = v->get<std::string>();
    }
  }

  template <typename E>
  void choice(const char* key, E& out, const std::function<E(std::string_view)>& parse,
              const std::function<std::string(E)>&) {
    const json* v = lookup(key);
    if (v == nullptr) return;
    if (!v->is_string()) return error(key, "expected a string");
    try {
      out = parse(v->get<std::string>());
    } catch (const Error& e) {
      error(key, e.what());
    }
  }

  void section(const char* key, const std::function<void()>& body) {
    const json* v = lookup(key);
    static const json empty = json::object();
    if (v != nullptr && !v->is_object()) {
      error(key, "expected an object");
      return;
    }
    frames_.push_back({v != nullptr ? v : &empty, path(key) + ".", {}});
    body();
    finish();
    frames_.pop_back();
  }

  void finish() {
    Frame& f = frames_.back();
    if (!f.node->is_object()) return;
    for (const auto& [k, _] : f.node->items()) {
      if (!f.known.count(k)) errors_.push_back(f.prefix + k + ": unknown key");
    }
  }

 private:
  struct Frame {
    const json* node;
    std::string prefix;
    std::set<std::string> known;
  };

  const json* lookup(const char* key) {
    Frame& f = frames_.back();
    f.known.insert(key);
    if (!f.node->is_object()) return nullptr;
    auto it = f.node->find(key);
    return it == f.node->end() ? nullptr : &*it;
  }
  std::string path(const char* key) const { return frames_.back().prefix + key; }
  void error(const char* key, const std::string& what) { errors_.push_back(path(key) + ": " + what); }

  std::vector<Frame> frames_;
  std::vector<std::string>& errors_;
};

/// Writes the same field walk out as ordered JSON.
class Writer {
 public:
  explicit Writer(ordered_json& root) { stack_.push_back(&root); }

  template <typename T>
  void field(const char* key, T& value) {
    if constexpr (std::is_same_v<T, std::filesystem::path>) {
      (*stack_.back())[key] = value.generic_string();
    } else {
      (*stack_.back())[key] = value;
    }
  }

  template <typename E>
  void choice(const char* key, E& value, const std::function<E(std::string_view)>&,
              const std::function<std::string(E)>& name) {
    (*stack_.back())[key] = name(value);
  }

  void section(const char* key, const std::function<void()>& body) {
    ordered_json& child = (*stack_.back())[key];
    child = ordered_json::object();
    stack_.push_back(&child);
    body();
    stack_.pop_back();
  }

 private:
  std::vector<ordered_json*> stack_;
};

std::string split_name(Split s) { return std::string(to_string(s)); }
std::string backend_name(ProfileBackend b) { return b == ProfileBackend::kTemplate ? "template" : "llm"; }
std::string encoder_name(EncoderMode m) { return m == EncoderMode::kHash ? "hash" : "checkpoint"; }

template <typename V>
void visit_pretrain(V& v, PretrainOptions& p) {
  v.field("steps", p.steps);
  v.field("batch", p.batch);
  v.field("lr", p.lr);
  v.field("clip", p.clip);
  v.field("eval_every", p.eval_every);
  v.field("time_budget_seconds", p.time_budget_seconds);
}

template <typename V>
void visit(V& v, RunConfig& c) {
  v.field("seed", c.seed);
  v.field("backend", c.backend);
  v.field("threads", c.threads);
  v.section("paths", [&] {
    v.field("root", c.paths.root);
    v.field("profiles", c.paths.profiles);
    v.field("strategies", c.paths.strategies);
    v.field("scripted", c.paths.scripted);
    v.field("prompts", c.paths.prompts);
    v.field("corpus", c.paths.corpus);
    v.field("checkpoints", c.paths.checkpoints);
    v.field("transcripts", c.paths.transcripts);
    v.field("reports", c.paths.reports);
  });
  v.section("encoder", [&] {
    v.template choice<EncoderMode>("mode", c.encoder.mode, parse_encoder_mode, encoder_name);
    v.field("checkpoint", c.encoder.checkpoint_name);
    v.field("dim", c.encoder.dim);
    v.field("max_history_chars", c.encoder.max_history_chars);
  });
  v.section("diffusion", [&] {
    v.field("N", c.stack.N);
    v.field("T", c.stack.T);
    v.field("beta_start", c.stack.beta_start);
    v.field("beta_end", c.stack.beta_end);
  });
  v.section("portrayer", [&] {
    v.field("hidden", c.stack.portrayer.hidden);
    v.field("step_features", c.stack.portrayer.step_features);
    v.field("temperature", c.stack.portrayer.temperature);
    v.field("sample_block", c.stack.portrayer.sample_block);
  });
  v.section("anticipator", [&] {
    v.field("dz", c.stack.anticipator.dz);
    v.field("hidden", c.stack.anticipator.hidden);
  });
  v.section("planner", [&] {
    v.field("layers", c.stack.planner.layers);
    v.field("heads", c.stack.planner.heads);
    v.field("ffn", c.stack.planner.ffn);
    v.field("action_hidden", c.stack.planner.action_hidden);
    v.field("mixture_persona", c.stack.mixture_persona);
  });
  v.section("critic", [&] {
    v.field("samples", c.critic.samples);
    v.field("temperature", c.critic.temperature);
    v.field("threshold", c.critic.threshold);
    v.field("strict", c.critic.strict);
  });
  v.section("profiles", [&] {
    v.template choice<ProfileBackend>("backend", c.profiles.backend, parse_profile_backend, backend_name);
    v.field("train", c.profiles.quota.train);
    v.field("valid", c.profiles.quota.valid);
    v.field("test", c.profiles.quota.test);
  });
  v.section("corpus", [&] {
    v.field("dialogues_per_profile", c.corpus.dialogues_per_profile);
    v.field("expert_follow", c.corpus.expert_follow);
  });
  v.section("pretrain", [&] {
    v.section("portrayer", [&] { visit_pretrain(v, c.pretrain_portrayer); });
    v.section("anticipator", [&] { visit_pretrain(v, c.pretrain_anticipator); });
    v.section("planner", [&] { visit_pretrain(v, c.pretrain_planner); });
  });
  v.section("rl", [&] {
    v.field("episodes", c.rl.episodes);
    v.field("lr", c.rl.lr);
    v.field("clip", c.rl.clip);
    v.field("gamma", c.rl.gamma);
    v.field("reward_to_go", c.rl.reward_to_go);
    v.field("eval_every", c.rl.eval_every);
    v.field("eval_repeats", c.rl.eval_repeats);
    v.field("max_failure_rate", c.rl.max_failure_rate);
  });
  v.section("sampler", [&] {
    v.field("beta", c.rl.sampler.beta);
    v.field("initial_weight", c.rl.sampler.initial_weight);
    v.field("as_written_proportional", c.rl.sampler.as_written_proportional);
    v.field("floor", c.rl.sampler.floor);
  });
  v.section("simulate", [&] {
    v.template choice<Split>("split", c.simulate.split, parse_split, split_name);
    v.field("episodes_per_profile", c.simulate.episodes_per_profile);
    v.field("policy", c.simulate.policy);
    v.field("planner_stage", c.simulate.planner_stage);
  });
  v.section("llm", [&] {
    v.field("base_url", c.llm.endpoint.base_url);
    v.field("path", c.llm.endpoint.path);
    v.field("model", c.llm.endpoint.model);
    v.field("api_key_env", c.llm.endpoint.api_key_env);
    v.field("timeout_seconds", c.llm.endpoint.timeout_seconds);
    v.field("max_retries", c.llm.endpoint.max_retries);
    v.field("backoff_initial_seconds", c.llm.endpoint.backoff_initial_seconds);
    v.field("backoff_max_seconds", c.llm.endpoint.backoff_max_seconds);
    v.field("max_in_flight", c.llm.endpoint.max_in_flight);
    v.field("fixture", c.llm.fixture);
    v.field("record", c.llm.record);
  });
}

}  // namespace

PretrainOptions& RunConfig::pretrain(const std::string& stage) {
  if (stage == "portrayer") return pretrain_portrayer;
  if (stage == "anticipator") return pretrain_anticipator;
  if (stage == "planner") return pretrain_planner;
  fail(ErrorKind::kArgument, "unknown stage '" + stage + "'");
}

const PretrainOptions& RunConfig::pretrain(const std::string& stage) const {
  return const_cast<RunConfig&>(*this).pretrain(stage);
}

json parse_json_strict(std::string_view text, std::string_view source) {
  // One key set per open object; the callback sees keys before values.
  std::vector<std::set<std::string>> open;
  std::string duplicate;
  json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        open.emplace_back();
        break;
      case json::parse_event_t::object_end:
        if (!open.empty()) open.pop_back();
        break;
      case json::parse_event_t::key: {
        const auto key = parsed.get<std::string>();
        if (!open.empty() && !open.back().insert(key).second && duplicate.empty()) duplicate = key;
        break;
      }
      default:
        break;
    }
    return true;
  };
  json out;
  try {
    out = json::parse(text.begin(), text.end(), cb);
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string(source) + ": " + e.what());
  }
  require(duplicate.empty(), ErrorKind::kParse, std::string(source) + ": duplicate key '" + duplicate + "'");
  return out;
}

RunConfig default_run_config(Task task) {
  RunConfig c;
  c.task = task;
  c.critic.task = task;
  c.profiles.quota = default_quota(task);
  c.pretrain_portrayer.steps = 2000;
  c.pretrain_portrayer.batch = 64;
  c.pretrain_portrayer.eval_every = 500;
  c.pretrain_anticipator.steps = 2000;
  c.pretrain_anticipator.batch = 16;
  c.pretrain_anticipator.eval_every = 500;
  c.pretrain_planner.steps = 1000;
  c.pretrain_planner.batch = 64;
  c.pretrain_planner.eval_every = 250;
  return c;
}

RunConfig resolve_run_config(const json& doc) {
  require(doc.is_object(), ErrorKind::kConfiguration, "config must be a JSON object");
  std::vector<std::string> errors;
  Task task = Task::kP4G;
  if (!doc.contains("task")) {
    errors.push_back("task: required (p4g or esconv)");
  } else if (!doc["task"].is_string()) {
    errors.push_back("task: expected a string");
  } else {
    try {
      task = parse_task(doc["task"].get<std::string>());
    } catch (const Error& e) {
      errors.push_back(std::string("task: ") + e.what());
    }
  }
  RunConfig c = default_run_config(task);
  Reader reader(doc, errors);
  std::string task_name(to_string(task));
  reader.field("task", task_name);
  visit(reader, c);
  reader.finish();
  if (!errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" +
                      (errors.size() == 1 ? "" : "s") + "):";
    for (const auto& e : errors) msg += "\n  " + e;
    fail(ErrorKind::kConfiguration, msg);
  }
  finalize_run_config(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::kConfiguration, "config file not found: " + path.string());
  return resolve_run_config(parse_json_strict(read_file(path), path.string()));
}

void finalize_run_config(RunConfig& c) {
  c.critic.task = c.task;
  const auto task_dir = c.paths.root / std::string(to_string(c.task));
  auto fill = [](std::filesystem::path& p, std::filesystem::path def) {
    if (p.empty()) p = std::move(def);
  };
  fill(c.paths.profiles, task_dir / "profiles.jsonl");
  fill(c.paths.corpus, task_dir / "corpus");
  fill(c.paths.checkpoints, c.paths.root / "checkpoints");
  fill(c.paths.transcripts, task_dir / "transcripts.jsonl");
  fill(c.paths.reports, task_dir / "report");

  std::vector<std::string> errors;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) errors.push_back(what);
  };
  check(c.stack.N > 0 && c.stack.T > 0 && c.stack.N % c.stack.T == 0,
        "diffusion.N must be a positive multiple of diffusion.T (N=" + std::to_string(c.stack.N) +
            ", T=" + std::to_string(c.stack.T) + ")");
  check(c.stack.beta_start > 0 && c.stack.beta_end < 1 && c.stack.beta_start <= c.stack.beta_end,
        "diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
  check(c.critic.samples > 0, "critic.samples must be positive");
  check(c.critic.temperature >= 0, "critic.temperature must be >= 0");
  check(c.critic.threshold >= -1 && c.critic.threshold <= 1, "critic.threshold must lie in [-1, 1]");
  check(c.backend == "scripted" || c.backend == "llm", "backend must be scripted or llm");
  check(c.threads >= 1, "threads must be >= 1");
  check(c.encoder.dim > 0, "encoder.dim must be positive");
  check(c.encoder.mode != EncoderMode::kCheckpoint || !c.encoder.checkpoint_name.empty(),
        "encoder.checkpoint is required in checkpoint mode");
  check(c.stack.planner.layers > 0 && c.stack.planner.heads > 0, "planner layers and heads must be positive");
  check(c.stack.portrayer.temperature > 0, "portrayer.temperature must be positive");
  for (const char* stage : {"portrayer", "anticipator", "planner"}) {
    const auto& p = c.pretrain(stage);
    check(p.steps > 0 && p.batch > 0 && p.eval_every > 0 && p.lr > 0,
          std::string("pretrain.") + stage + ": steps, batch, eval_every and lr must be positive");
  }
  check(c.rl.episodes > 0 && c.rl.eval_every > 0 && c.rl.lr > 0 && c.rl.eval_repeats > 0,
        "rl: episodes, eval_every, eval_repeats and lr must be positive");
  check(c.rl.gamma > 0 && c.rl.gamma <= 1, "rl.gamma must lie in (0, 1]");
  check(c.rl.max_failure_rate >= 0 && c.rl.max_failure_rate <= 1, "rl.max_failure_rate must lie in [0, 1]");
  check(c.rl.sampler.beta >= 0 && c.rl.sampler.floor > 0, "sampler.beta must be >= 0 and sampler.floor > 0");
  check(c.simulate.episodes_per_profile > 0, "simulate.episodes_per_profile must be positive");
  check(c.simulate.policy == "udp" || c.simulate.policy == "markov-expert" || c.simulate.policy == "uniform",
        "simulate.policy must be udp, markov-expert or uniform");
  check(c.simulate.planner_stage == "rl" || c.simulate.planner_stage == "planner",
        "simulate.planner_stage must be rl or planner");
  check(c.corpus.dialogues_per_profile >= 0, "corpus.dialogues_per_profile must be >= 0");
  check(c.profiles.quota.train > 0 && c.profiles.quota.valid > 0 && c.profiles.quota.test > 0,
        "profiles quotas must be positive");
  check(c.llm.endpoint.max_retries >= 0 && c.llm.endpoint.timeout_seconds > 0 && c.llm.endpoint.max_in_flight > 0,
        "llm: max_retries >= 0, timeout_seconds > 0 and max_in_flight > 0 required");
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    fail(ErrorKind::kConfiguration, msg);
  }
  const std::uint64_t seed = c.seed;
  c.pretrain_portrayer.seed = derive_seed(seed, "pretrain");
  c.pretrain_anticipator.seed = derive_seed(seed, "pretrain");
  c.pretrain_planner.seed = derive_seed(seed, "pretrain");
  c.rl.seed = seed;
  c.rl.threads = c.threads;
  const std::string hash = config_hash(c);
  c.pretrain_portrayer.config_hash = c.pretrain_anticipator.config_hash = c.pretrain_planner.config_hash = hash;
  c.rl.config_hash = hash;
}

nlohmann::ordered_json to_json(const RunConfig& config) {
  RunConfig c = config;
  ordered_json j;
  j["task"] = std::string(to_string(c.task));
  Writer writer(j);
  visit(writer, c);
  return j;
}

std::string config_hash(const RunConfig& config) {
  ordered_json j = to_json(config);
  // Output locations do not change results.
  j.erase("paths");
  j.erase("threads");
  return hash_hex(j.dump());
}

}  // namespace udp
