#include "udp/cli.hpp"

#include <iomanip>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "udp/config.hpp"
#include "udp/evaluation.hpp"
#include "udp/llm.hpp"
#include "udp/policies.hpp"
#include "udp/scripted.hpp"
#include "udp/trainer.hpp"

namespace udp {
namespace {

using nlohmann::ordered_json;

struct CommonFlags {
  std::string config;
  std::string task;
  std::optional<std::uint64_t> seed;
  std::string backend;
  std::string log_level = "info";
  bool print_config = false;
};

/// Everything a subcommand needs, built lazily from the resolved config.
class Context {
 public:
  explicit Context(RunConfig config) : config_(std::move(config)) {}

  RunConfig& config() { return config_; }
  Task task() const { return config_.task; }

  const StrategySet& strategies() {
    if (!strategies_) {
      strategies_ = config_.paths.strategies.empty() ? StrategySet::load_default(config_.task)
                                                     : StrategySet::load(config_.paths.strategies, config_.task);
    }
    return *strategies_;
  }

  const ScriptedWorld& world() {
    if (!world_) {
      ScriptedConfig sc = config_.paths.scripted.empty() ? default_scripted_config(config_.task)
                                                         : load_scripted_config(config_.paths.scripted, config_.task);
      world_ = std::make_unique<ScriptedWorld>(std::move(sc), strategies());
    }
    return *world_;
  }

  std::vector<std::string> situations() {
    return config_.task == Task::kESConv ? world().config().situations : std::vector<std::string>{};
  }

  ChatModel& chat() {
    if (chat_) return *chat_;
    const auto& llm = config_.llm;
    if (!llm.fixture.empty()) {
      chat_ = std::make_unique<FixtureChatModel>(llm.endpoint.model, llm.fixture);
      return *chat_;
    }
    client_ = std::make_unique<OpenAiChatClient>(llm.endpoint);
    if (!llm.record.empty()) {
      chat_ = std::make_unique<RecordingChatModel>(*client_, llm.endpoint.model, llm.record);
      return *chat_;
    }
    return *client_;
  }

  ActorFactory actors() {
    if (config_.backend == "scripted") {
      const ScriptedWorld& w = world();
      const CriticConfig critic = config_.critic;
      return [&w, critic] { return w.make_actors(critic); };
    }
    ChatModel& model = chat();
    if (!prompts_) prompts_ = load_prompts(config_.task, config_.paths.prompts);
    const PromptSet& prompts = *prompts_;
    const CriticConfig critic = config_.critic;
    return [&model, &prompts, critic] { return make_llm_actors(model, prompts, critic); };
  }

  EpisodeConfig episode() const {
    EpisodeConfig e;
    e.critic = config_.critic;
    e.max_turns = config_.stack.T;
    return e;
  }

  std::shared_ptr<const TextEncoder> encoder() {
    if (!encoder_) encoder_ = TextEncoder::create(config_.encoder);
    return encoder_;
  }

  std::unique_ptr<UdpStack> stack() {
    return std::make_unique<UdpStack>(config_.task, encoder(), strategies(), config_.stack,
                                      derive_seed(config_.seed, "init"));
  }

  CheckpointStore store() const { return CheckpointStore(config_.paths.checkpoints); }

  /// Loads the named stages, failing with the first missing one.
  void restore(UdpStack& stack, std::initializer_list<std::pair<const char*, const char*>> stages) {
    const CheckpointStore s = store();
    for (const auto& [dir, stage] : stages) {
      require(s.has(config_.task, dir), ErrorKind::kPrecondition,
              std::string("missing pretrained ") + dir + " checkpoint under " +
                  s.stage_dir(config_.task, dir).string() + "; run the " + dir + " stage first");
    }
    for (const auto& [dir, stage] : stages) restore_stage(stack, stage, s.load_best(config_.task, dir));
  }

  ProfileSet profiles() {
    const auto& p = config_.paths.profiles;
    require(std::filesystem::exists(p), ErrorKind::kPrecondition,
            "profiles file " + p.string() + " not found; run generate-profiles first");
    return load_profiles(p);
  }

 private:
  RunConfig config_;
  std::optional<StrategySet> strategies_;
  std::unique_ptr<ScriptedWorld> world_;
  std::unique_ptr<OpenAiChatClient> client_;
  std::unique_ptr<ChatModel> chat_;
  std::optional<PromptSet> prompts_;
  std::shared_ptr<const TextEncoder> encoder_;
};

RunConfig resolve(const CommonFlags& flags) {
  RunConfig c;
  if (!flags.config.empty()) {
    nlohmann::json doc = parse_json_strict(read_file(flags.config), flags.config);
    if (!flags.task.empty()) doc["task"] = flags.task;
    c = resolve_run_config(doc);
  } else {
    require(!flags.task.empty(), ErrorKind::kConfiguration, "pass --task or --config");
    c = default_run_config(parse_task(flags.task));
  }
  if (flags.seed) c.seed = *flags.seed;
  if (!flags.backend.empty()) c.backend = flags.backend;
  return c;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, j.dump(2) + "\n");
}

std::vector<Transcript> load_corpus_split(const RunConfig& c, const char* split) {
  const auto path = c.paths.corpus / (std::string(split) + ".jsonl");
  require(std::filesystem::exists(path), ErrorKind::kPrecondition,
          "corpus file " + path.string() + " not found; run build-corpus first");
  return load_transcripts(path);
}

ordered_json stage_summary(const StageReport& r) {
  return ordered_json{{"stage", r.stage},
                      {"best_step", r.best_step},
                      {"best_metric", r.best_metric},
                      {"metrics", r.final_metrics},
                      {"checkpoint", r.checkpoint.generic_string()},
                      {"seconds", r.seconds}};
}

int cmd_generate_profiles(Context& ctx, const std::string& out_override, std::ostream& out) {
  auto& c = ctx.config();
  ProfileGenerationOptions opt;
  opt.backend = c.profiles.backend;
  if (opt.backend == ProfileBackend::kLlm) opt.llm = &ctx.chat();
  const ProfileSet set = build_profile_set(c.task, c.seed, opt, c.profiles.quota);
  const std::filesystem::path path = out_override.empty() ? c.paths.profiles : std::filesystem::path(out_override);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_profiles(set, path);
  out << "wrote " << set.profiles.size() << " profiles to " << path.generic_string() << "\n";
  return 0;
}

int cmd_build_corpus(Context& ctx, std::optional<std::size_t> resume_from, std::ostream& out) {
  auto& c = ctx.config();
  const ProfileSet profiles = ctx.profiles();
  CorpusOptions opt = default_corpus_options(c.task, ctx.situations());
  if (c.corpus.dialogues_per_profile > 0) opt.dialogues_per_profile = c.corpus.dialogues_per_profile;
  opt.expert_follow = c.corpus.expert_follow;
  std::unique_ptr<StrategyAnnotator> annotator;
  std::optional<PromptSet> prompts;
  if (c.backend == "llm") {
    prompts = load_prompts(c.task, c.paths.prompts);
    annotator = std::make_unique<LlmStrategyAnnotator>(ctx.chat(), ctx.strategies(), prompts->annotator);
  } else {
    annotator = std::make_unique<LoggedStrategyAnnotator>();
  }
  std::filesystem::create_directories(c.paths.corpus);
  for (const char* split : {"train", "valid"}) {
    const auto final_path = c.paths.corpus / (std::string(split) + ".jsonl");
    const auto partial_path = c.paths.corpus / (std::string(split) + ".partial.jsonl");
    if (std::filesystem::exists(final_path) && !resume_from) {
      out << split << ": " << final_path.generic_string() << " exists, skipping\n";
      continue;
    }
    CorpusOptions o = opt;
    std::vector<Transcript> done;
    if (resume_from && std::filesystem::exists(partial_path)) {
      done = load_transcripts(partial_path);
      o.resume_from = *resume_from;
    } else if (std::filesystem::exists(final_path)) {
      continue;
    }
    const auto selected = profiles.select(parse_split(split));
    CorpusBuild build = build_pretrain_corpus(selected, ctx.strategies(), ctx.actors(), ctx.episode(),
                                              derive_seed(c.seed, std::string("corpus.") + split), o);
    for (auto& t : build.corpus.dialogues) {
      annotate_strategies(t, *annotator, ctx.strategies());
      done.push_back(std::move(t));
    }
    if (build.resume_token) {
      save_transcripts(done, partial_path);
      fail(ErrorKind::kEpisode, std::string(split) + " corpus stopped after " + std::to_string(done.size()) +
                                    " dialogues (" + build.error + "); rerun with --resume-from " +
                                    std::to_string(*build.resume_token));
    }
    save_transcripts(done, final_path);
    std::filesystem::remove(partial_path);
    out << split << ": " << done.size() << " dialogues, hash " << transcripts_hash(done) << "\n";
  }
  return 0;
}

int cmd_pretrain(Context& ctx, const std::string& stage_arg, std::ostream& out) {
  auto& c = ctx.config();
  PretrainCorpus train{c.task, load_corpus_split(c, "train")};
  PretrainCorpus valid{c.task, load_corpus_split(c, "valid")};
  auto stack = ctx.stack();
  const CheckpointStore store = ctx.store();
  std::vector<std::string> stages;
  if (stage_arg == "all") {
    stages = {"portrayer", "anticipator", "planner"};
  } else {
    stages = {stage_arg};
    if (stage_arg == "planner") ctx.restore(*stack, {{"portrayer", "portrayer"}, {"anticipator", "anticipator"}});
  }
  ordered_json summary = ordered_json::array();
  for (const auto& stage : stages) {
    const StageReport r = pretrain_stage(stage, *stack, train, valid, c.pretrain(stage), &store);
    write_json(store.stage_dir(c.task, stage) / "curve.json", r.curve);
    summary.push_back(stage_summary(r));
  }
  out << summary.dump(2) << "\n";
  return 0;
}

int cmd_train_rl(Context& ctx, std::ostream& out) {
  auto& c = ctx.config();
  auto stack = ctx.stack();
  ctx.restore(*stack, {{"portrayer", "portrayer"}, {"anticipator", "anticipator"}, {"planner", "planner"}});
  const ProfileSet profiles = ctx.profiles();
  const CheckpointStore store = ctx.store();
  const RlReport r = rl_train(*stack, profiles, ctx.actors(), ctx.episode(), ctx.situations(), c.rl, &store);
  ordered_json j{{"episodes", r.episodes},
                 {"failed_episodes", r.failed_episodes},
                 {"successes", r.successes},
                 {"best_valid_ssr", r.best_valid_ssr},
                 {"best_episode", r.best_episode},
                 {"sampler_weights", r.sampler_weights},
                 {"sampler_probabilities", r.sampler_probabilities},
                 {"frozen_hash", r.frozen_hash_after},
                 {"checkpoint", r.checkpoint.generic_string()},
                 {"seconds", r.seconds},
                 {"curve", r.curve}};
  write_json(store.stage_dir(c.task, "rl") / "curve.json", j);
  j.erase("curve");
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_simulate(Context& ctx, const std::string& profiles_override, const std::string& out_override,
                 std::ostream& out) {
  auto& c = ctx.config();
  if (!profiles_override.empty()) c.paths.profiles = profiles_override;
  const ProfileSet profiles = ctx.profiles();
  const auto selected = profiles.select(c.simulate.split);
  require(!selected.empty(), ErrorKind::kData, "no profiles in the selected split");
  std::vector<Transcript> ts;
  const std::uint64_t seed = derive_seed(c.seed, "simulate");
  if (c.simulate.policy == "udp") {
    auto stack = ctx.stack();
    const char* planner_dir = c.simulate.planner_stage == "rl" ? "rl" : "planner";
    ctx.restore(*stack, {{"portrayer", "portrayer"}, {"anticipator", "anticipator"}, {planner_dir, "planner"}});
    ts = simulate_agent(*stack, selected, ctx.actors(), ctx.episode(), ctx.situations(), seed,
                        c.simulate.episodes_per_profile, UdpAgent::Mode::kGreedy, c.threads);
  } else {
    const int K = ctx.strategies().size();
    const bool expert = c.simulate.policy == "markov-expert";
    ts = simulate_policy(
        [&]() -> std::unique_ptr<Policy> {
          if (expert) return std::make_unique<MarkovExpertPolicy>(K, c.corpus.expert_follow);
          return std::make_unique<UniformPolicy>(K);
        },
        selected, ctx.strategies(), ctx.actors(), ctx.episode(), ctx.situations(), seed,
        c.simulate.episodes_per_profile, c.threads);
  }
  int incomplete = 0;
  for (const auto& t : ts) {
    if (t.complete) {
      validate_transcript(t, c.critic, c.stack.T);
    } else {
      ++incomplete;
    }
  }
  const std::filesystem::path path = out_override.empty() ? c.paths.transcripts : std::filesystem::path(out_override);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_transcripts(ts, path);
  out << "wrote " << ts.size() << " transcripts to " << path.generic_string() << " (SR "
      << std::setprecision(4) << success_rate(ts) << ", hash " << transcripts_hash(ts) << ")\n";
  if (incomplete > 0) {
    fail(ErrorKind::kEpisode, std::to_string(incomplete) + " episodes ended early with backend errors");
  }
  return 0;
}

int cmd_evaluate(Context& ctx, const std::string& transcripts, const std::string& out_dir, std::ostream& out) {
  auto& c = ctx.config();
  const std::filesystem::path in = transcripts.empty() ? c.paths.transcripts : std::filesystem::path(transcripts);
  const auto ts = load_transcripts(in);
  require(!ts.empty(), ErrorKind::kData, "no transcripts in " + in.string());
  require(ts.front().task == c.task, ErrorKind::kData,
          "transcripts are for task " + std::string(to_string(ts.front().task)) + "; pass --task accordingly");
  const EvalReport report = evaluate_transcripts(ts, ctx.strategies(), config_hash(c), c.seed, c.stack.T);
  const std::filesystem::path dir = out_dir.empty() ? c.paths.reports : std::filesystem::path(out_dir);
  emit_report(report, dir);
  out << "SR " << report.sr << "  SSR " << report.ssr << "  AvgT " << report.avg_turns << "  -> "
      << dir.generic_string() << "\n";
  return 0;
}

int cmd_report(const std::string& in_dir, std::ostream& out) {
  const auto path = std::filesystem::path(in_dir) / "report.json";
  require(std::filesystem::exists(path), ErrorKind::kPrecondition, path.string() + " not found; run evaluate first");
  const EvalReport r = report_from_json(parse_json_strict(read_file(path), path.string()));
  out << std::fixed << std::setprecision(3);
  out << "task " << to_string(r.task) << ", policy " << r.policy << ", backend " << r.backend << ", " << r.episodes
      << " episodes\n";
  out << "SR " << r.sr << "  SSR " << r.ssr << "  AvgT " << r.avg_turns << "\n\n";
  out << "| dimension | option | SR | SSR |\n|---|---|---|---|\n";
  for (const auto& d : r.breakdown.dimensions) {
    for (const auto& g : d.options) out << "| " << d.dimension << " | " << g.label << " | " << g.sr << " | " << g.ssr << " |\n";
    out << "| " << d.dimension << " | abs delta | " << d.delta_sr << " | " << d.delta_ssr << " |\n";
  }
  out << "| average | abs delta | " << r.breakdown.avg_delta_sr << " | " << r.breakdown.avg_delta_ssr << " |\n";
  if (r.divergence) out << "\nIntra " << r.divergence->intra << "  Inter " << r.divergence->inter << "\n";
  if (!r.persona_accuracy.accuracy.empty()) {
    out << "\npersona accuracy by turn:";
    for (double a : r.persona_accuracy.accuracy) out << " " << a;
    out << "\n";
  }
  return 0;
}

void setup_logging(const std::string& level, std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto logger = std::make_shared<spdlog::logger>("udp", sink);
  logger->set_pattern("[%H:%M:%S] [%l] %v");
  logger->set_level(spdlog::level::from_str(level));
  spdlog::set_default_logger(logger);
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfiguration:
    case ErrorKind::kArgument:
      return 2;
    case ErrorKind::kPrecondition:
      return 3;
    case ErrorKind::kParse:
    case ErrorKind::kIo:
    case ErrorKind::kData:
    case ErrorKind::kVocabulary:
    case ErrorKind::kValidation:
    case ErrorKind::kAnnotation:
      return 4;
    case ErrorKind::kTransport:
    case ErrorKind::kProtocol:
    case ErrorKind::kEpisode:
      return 5;
    case ErrorKind::kShape:
    case ErrorKind::kNumericalDomain:
    case ErrorKind::kInvariant:
      return 6;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"User-tailored dialogue policy planning: profiles, corpora, training, simulation and evaluation."};
  app.name("udp");
  app.require_subcommand(1);
  CommonFlags flags;
  app.add_option("--config", flags.config, "Run config JSON");
  app.add_option("--task", flags.task, "p4g or esconv (overrides the config)");
  app.add_option("--seed", flags.seed, "Base seed (overrides the config)");
  app.add_option("--backend", flags.backend, "scripted or llm (overrides the config)")
      ->check(CLI::IsMember({"scripted", "llm"}));
  app.add_option("--log-level", flags.log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  app.add_flag("--print-config", flags.print_config, "Print the effective config before running");

  std::string out_path, profiles_path, transcripts_path, stage = "all", in_dir, split;
  std::optional<std::size_t> resume_from;
  std::optional<int> episodes;
  std::string policy;

  auto* gen = app.add_subcommand("generate-profiles", "Generate user profiles for every persona and split");
  gen->add_option("--out", out_path, "Output JSONL (default: paths.profiles)");

  auto* corpus = app.add_subcommand("build-corpus", "Self-play pretraining corpora for the train and valid splits");
  corpus->add_option("--resume-from", resume_from, "Resume token printed by an interrupted build");

  auto* pre = app.add_subcommand("pretrain", "Pretrain one stage (or all three in order)");
  pre->add_option("--stage", stage, "portrayer, anticipator, planner or all")
      ->check(CLI::IsMember({"portrayer", "anticipator", "planner", "all"}));
  pre->add_option("--corpus", transcripts_path, "Corpus directory (default: paths.corpus)");

  auto* rl = app.add_subcommand("train-rl", "Active-sampling policy-gradient training of the planner");
  rl->add_option("--episodes", episodes, "Training episodes");

  auto* sim = app.add_subcommand("simulate", "Run episodes and write transcripts");
  sim->add_option("--profiles", profiles_path, "Profiles JSONL");
  sim->add_option("--episodes", episodes, "Episodes per profile");
  sim->add_option("--out", out_path, "Transcripts JSONL");
  sim->add_option("--policy", policy, "udp, markov-expert or uniform")
      ->check(CLI::IsMember({"udp", "markov-expert", "uniform"}));
  sim->add_option("--split", split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));

  auto* eval = app.add_subcommand("evaluate", "Compute metrics and write a report directory");
  eval->add_option("--transcripts", transcripts_path, "Transcripts JSONL");
  eval->add_option("--out", out_path, "Report directory");

  auto* rep = app.add_subcommand("report", "Summarize a report directory");
  rep->add_option("--in", in_dir, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  setup_logging(flags.log_level, err);
  if (rep->parsed()) {
    try {
      return cmd_report(in_dir, out);
    } catch (const Error& e) {
      err << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
      return exit_code_for(e.kind());
    }
  }

  RunConfig config;
  try {
    config = resolve(flags);
    if (!transcripts_path.empty() && pre->parsed()) config.paths.corpus = transcripts_path;
    if (episodes && rl->parsed()) config.rl.episodes = *episodes;
    if (episodes && sim->parsed()) config.simulate.episodes_per_profile = *episodes;
    if (!policy.empty()) config.simulate.policy = policy;
    if (!split.empty()) config.simulate.split = parse_split(split);
    finalize_run_config(config);
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return 2;
  }
  spdlog::info("task {} config hash {} seed {} backend {}", to_string(config.task), config_hash(config), config.seed,
               config.backend);
  if (flags.print_config) out << to_json(config).dump(2) << "\n";

  Context ctx(std::move(config));
  try {
    if (gen->parsed()) return cmd_generate_profiles(ctx, out_path, out);
    if (corpus->parsed()) return cmd_build_corpus(ctx, resume_from, out);
    if (pre->parsed()) return cmd_pretrain(ctx, stage, out);
    if (rl->parsed()) return cmd_train_rl(ctx, out);
    if (sim->parsed()) return cmd_simulate(ctx, profiles_path, out_path, out);
    if (eval->parsed()) return cmd_evaluate(ctx, transcripts_path, out_path, out);
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace udp
