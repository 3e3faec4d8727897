#include "udp/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "udp/error.hpp"
#include "udp/evaluation.hpp"
#include "udp/nn/ops.hpp"
#include "udp/nn/optim.hpp"
#include "udp/policies.hpp"

namespace udp {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string matrix_hash(const nn::Matrix& m) {
  Fnv1a h;
  const Eigen::Index shape[2] = {m.rows(), m.cols()};
  h.update(shape, sizeof(shape));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      h.update(&v, sizeof(v));
    }
  }
  return h.hex();
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first
/// exception is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

json stack_identity(const UdpStack& stack) {
  return json{{"task", std::string(to_string(stack.task))},
              {"encoder", stack.encoder->fingerprint()},
              {"persona_bank", matrix_hash(stack.persona_bank)},
              {"strategies", stack.strategies.hash()},
              {"N", stack.schedule.N},
              {"T", stack.schedule.T},
              {"beta_start", stack.config.beta_start},
              {"beta_end", stack.config.beta_end}};
}

std::vector<nn::Matrix> snapshot(const nn::ParameterList& params) {
  std::vector<nn::Matrix> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(p->value);
  return out;
}

void restore(const nn::ParameterList& params, const std::vector<nn::Matrix>& values) {
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = values[k];
}

void after_update(UdpStack& stack, const std::string& stage) {
  if (stage == "portrayer") stack.portrayer.refresh_cache();
}

std::vector<PortrayerExample> portrayer_examples(const UdpStack& stack, std::span<const Transcript> dialogues) {
  std::vector<PortrayerExample> out;
  for (const auto& tr : dialogues) {
    std::vector<std::string> utts;
    for (const auto& turn : tr.turns) {
      utts.push_back(turn.user_utterance);
      PortrayerExample ex;
      ex.condition = stack.encoder->encode_condition(utts).vector;
      ex.turn = turn.turn;
      ex.label = tr.persona_index;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

template <typename T>
std::vector<T> draw_batch(const std::vector<T>& pool, int batch, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) out.push_back(pool[pick(rng)]);
  return out;
}

/// Distinct-item batch for the contrastive stage; duplicates would be
/// their own negatives.
std::vector<AnticipatorExample> draw_distinct(const std::vector<AnticipatorExample>& pool, int batch, Rng& rng) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch), pool.size());
  for (std::size_t k = 0; k < n; ++k) {
    std::uniform_int_distribution<std::size_t> d(k, pool.size() - 1);
    std::swap(idx[k], idx[d(rng)]);
  }
  std::vector<AnticipatorExample> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(pool[idx[k]]);
  return out;
}

[[noreturn]] void abort_non_finite(const std::string& stage, long step, double loss, const nn::ParameterList& params,
                                   const CheckpointStore* store, Task task) {
  ordered_json dump{{"stage", stage}, {"step", step}, {"loss", std::isfinite(loss) ? json(loss) : json("non-finite")}};
  ordered_json grads = ordered_json::object();
  for (const auto* p : params) {
    const double n = p->grad.norm();
    grads[p->name] = std::isfinite(n) ? json(n) : json("non-finite");
  }
  dump["grad_norms"] = std::move(grads);
  std::string where;
  if (store != nullptr) {
    const auto path = store->stage_dir(task, stage) / "nan_dump.json";
    std::filesystem::create_directories(path.parent_path());
    write_file(path, dump.dump(2) + "\n");
    where = " (diagnostics in " + path.string() + ")";
  }
  fail(ErrorKind::kNumericalDomain,
       stage + ": non-finite loss at step " + std::to_string(step) + where + ": " + dump.dump());
}

struct AdamState {
  std::vector<nn::Matrix> m, v;
  long steps = 0;
};

AdamState save_adam(nn::Adam& adam) { return {adam.first_moments(), adam.second_moments(), adam.steps()}; }

void export_adam(const AdamState& s, const nn::ParameterList& params, nn::Checkpoint& ckpt) {
  for (std::size_t k = 0; k < params.size() && k < s.m.size(); ++k) {
    ckpt.tensors.emplace_back("adam.m." + params[k]->name, s.m[k]);
    ckpt.tensors.emplace_back("adam.v." + params[k]->name, s.v[k]);
  }
  ckpt.meta["adam_steps"] = s.steps;
}

}  // namespace

// ---------------------------------------------------------------- corpus

CorpusOptions default_corpus_options(Task task, const std::vector<std::string>& situations) {
  CorpusOptions o;
  if (task == Task::kP4G) {
    o.dialogues_per_profile = 2;
  } else {
    require(!situations.empty(), ErrorKind::kConfiguration, "ESConv corpus needs situations");
    o.dialogues_per_profile = static_cast<int>(situations.size());
    o.situations = situations;
  }
  return o;
}

CorpusBuild build_pretrain_corpus(std::span<const UserProfile* const> profiles, const StrategySet& strategies,
                                  const ActorFactory& actors, const EpisodeConfig& episode, std::uint64_t seed,
                                  const CorpusOptions& options) {
  require(options.dialogues_per_profile > 0, ErrorKind::kConfiguration, "dialogues per profile must be positive");
  CorpusBuild out;
  out.corpus.task = strategies.task();
  const auto per = static_cast<std::size_t>(options.dialogues_per_profile);
  const std::size_t total = profiles.size() * per;
  require(options.resume_from <= total, ErrorKind::kArgument, "resume token beyond the corpus size");
  for (std::size_t idx = options.resume_from; idx < total; ++idx) {
    const UserProfile& profile = *profiles[idx / per];
    const std::size_t j = idx % per;
    const std::string situation = options.situations.empty() ? std::string() : options.situations[j % options.situations.size()];
    MarkovExpertPolicy policy(strategies.size(), options.expert_follow);
    ActorSet set = actors();
    const std::uint64_t ep_seed = derive_seed(derive_seed(seed, profile.profile_id), static_cast<std::uint64_t>(j));
    try {
      out.corpus.dialogues.push_back(run_episode(policy, profile, set, strategies, episode, ep_seed, situation));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kEpisode && e.kind() != ErrorKind::kTransport && e.kind() != ErrorKind::kProtocol) {
        throw;
      }
      spdlog::warn("corpus build stopped at item {}: {}", idx, e.what());
      out.resume_token = idx;
      out.error = e.what();
      return out;
    }
  }
  return out;
}

std::string LoggedStrategyAnnotator::annotate(const Transcript& transcript, std::size_t turn) {
  return transcript.turns.at(turn).strategy;
}

LlmStrategyAnnotator::LlmStrategyAnnotator(ChatModel& model, const StrategySet& strategies,
                                           std::string prompt_template)
    : model_(model), strategies_(strategies), prompt_(std::move(prompt_template)) {}

std::string LlmStrategyAnnotator::annotate(const Transcript& transcript, std::size_t turn) {
  std::string options;
  for (const auto& s : strategies_.items()) options += "- " + s.id + ": " + s.description + "\n";
  std::string history;
  for (std::size_t k = 0; k < turn; ++k) {
    history += std::string(system_role_name(transcript.task)) + ": " + transcript.turns[k].system_utterance + "\n";
    history += std::string(user_role_name(transcript.task)) + ": " + transcript.turns[k].user_utterance + "\n";
  }
  std::string prompt = prompt_;
  auto fill = [&](const std::string& key, const std::string& value) {
    for (auto pos = prompt.find(key); pos != std::string::npos; pos = prompt.find(key, pos + value.size())) {
      prompt.replace(pos, key.size(), value);
    }
  };
  fill("{strategies}", options);
  fill("{history}", history);
  fill("{utterance}", transcript.turns.at(turn).system_utterance);
  ChatRequest req;
  req.messages = {{"user", prompt}};
  req.temperature = 0.0;
  const auto replies = model_.complete(req);
  require(replies.size() == 1, ErrorKind::kProtocol, "annotator expected one completion");
  // Accept the reply when it names exactly one strategy id.
  std::string text = replies.front();
  std::transform(text.begin(), text.end(), text.begin(), [](unsigned char c) { return std::tolower(c); });
  std::vector<std::string> found;
  for (const auto& s : strategies_.items()) {
    if (text.find(s.id) != std::string::npos) found.push_back(s.id);
  }
  // Drop ids that only matched inside a longer matched id.
  std::erase_if(found, [&](const std::string& id) {
    return std::any_of(found.begin(), found.end(),
                       [&](const std::string& other) { return other != id && other.find(id) != std::string::npos; });
  });
  require(found.size() <= 1, ErrorKind::kAnnotation, "annotator reply names several strategies: " + replies.front());
  require(!found.empty(), ErrorKind::kAnnotation, "annotator label outside the strategy set: " + replies.front());
  return found.front();
}

void annotate_strategies(Transcript& transcript, StrategyAnnotator& annotator, const StrategySet& strategies) {
  for (std::size_t k = 0; k < transcript.turns.size(); ++k) {
    const std::string label = annotator.annotate(transcript, k);
    require(strategies.contains(label), ErrorKind::kAnnotation, "annotation '" + label + "' is not a strategy id");
    transcript.turns[k].strategy = label;
    transcript.turns[k].strategy_index = strategies.index_of(label);
  }
}

// ---------------------------------------------------------- checkpoints

std::filesystem::path CheckpointStore::stage_dir(Task task, const std::string& stage) const {
  return root_ / std::string(to_string(task)) / stage;
}

std::filesystem::path CheckpointStore::save_best(Task task, const std::string& stage, long step,
                                                 const nn::Checkpoint& ckpt) const {
  const auto dir = stage_dir(task, stage);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const auto path = dir / (std::to_string(step) + ".ckpt");
  std::string previous;
  if (std::filesystem::exists(dir / "best")) previous = read_file(dir / "best");
  nn::save_checkpoint(ckpt, path);
  write_file(dir / "best", path.filename().string());
  if (!previous.empty() && previous != path.filename().string()) std::filesystem::remove(dir / previous, ec);
  return path;
}

bool CheckpointStore::has(Task task, const std::string& stage) const {
  return std::filesystem::exists(stage_dir(task, stage) / "best");
}

nn::Checkpoint CheckpointStore::load_best(Task task, const std::string& stage) const {
  const auto dir = stage_dir(task, stage);
  require(has(task, stage), ErrorKind::kPrecondition,
          "no " + stage + " checkpoint under " + dir.string() + "; run that stage first");
  return nn::load_checkpoint(dir / read_file(dir / "best"));
}

nn::ParameterList stage_parameters(UdpStack& stack, const std::string& stage) {
  if (stage == "portrayer") return stack.portrayer.parameters();
  if (stage == "anticipator") return stack.anticipator.parameters();
  if (stage == "planner") return stack.planner.parameters();
  fail(ErrorKind::kArgument, "unknown stage '" + stage + "'");
}

nn::Checkpoint stage_checkpoint(UdpStack& stack, const std::string& stage, long step, json meta) {
  nn::Checkpoint ckpt;
  ckpt.stage = stage;
  ckpt.meta = std::move(meta);
  ckpt.meta["stage"] = stage;
  ckpt.meta["step"] = step;
  ckpt.meta["identity"] = stack_identity(stack);
  nn::export_parameters(stage_parameters(stack, stage), ckpt);
  return ckpt;
}

void restore_stage(UdpStack& stack, const std::string& stage, const nn::Checkpoint& ckpt) {
  require(ckpt.stage == stage, ErrorKind::kValidation, "checkpoint holds stage '" + ckpt.stage + "', not " + stage);
  const json want = stack_identity(stack);
  const json& got = ckpt.meta.contains("identity") ? ckpt.meta.at("identity") : json();
  for (const auto& [key, value] : want.items()) {
    require(got.contains(key) && got.at(key) == value, ErrorKind::kValidation,
            stage + " checkpoint was trained with a different " + key);
  }
  nn::import_parameters(stage_parameters(stack, stage), ckpt);
  after_update(stack, stage);
}

// ------------------------------------------------------------ pretraining

PortrayerEval evaluate_portrayer(const UdpStack& stack, std::span<const Transcript> dialogues) {
  PortrayerEval out;
  out.by_turn.assign(static_cast<std::size_t>(stack.max_turns()), 0.0);
  out.counts.assign(out.by_turn.size(), 0);
  if (dialogues.empty()) return out;
  const ReplayResult replay = replay_transcripts(stack, dialogues, false);
  std::vector<int> hits(out.by_turn.size(), 0);
  int total = 0, total_hits = 0, final_hits = 0;
  for (std::size_t d = 0; d < dialogues.size(); ++d) {
    const auto& preds = replay.persona_predictions[d];
    for (std::size_t t = 0; t < preds.size(); ++t) {
      const bool hit = preds[t] == dialogues[d].persona_index;
      ++out.counts[t];
      hits[t] += hit;
      ++total;
      total_hits += hit;
    }
    if (!preds.empty()) final_hits += preds.back() == dialogues[d].persona_index;
  }
  for (std::size_t t = 0; t < hits.size(); ++t) {
    if (out.counts[t] > 0) out.by_turn[t] = static_cast<double>(hits[t]) / out.counts[t];
  }
  out.accuracy = total > 0 ? static_cast<double>(total_hits) / total : 0.0;
  out.final_accuracy = static_cast<double>(final_hits) / static_cast<double>(dialogues.size());
  return out;
}

std::vector<AnticipatorExample> anticipator_examples(const UdpStack& stack, std::span<const Transcript> dialogues) {
  std::vector<AnticipatorExample> out;
  for (const auto& tr : dialogues) {
    // The bridge collapses onto the persona at t = T, so that turn carries no signal.
    const int last = std::min(tr.length(), stack.max_turns() - 1);
    for (int t = 1; t <= last; ++t) {
      const DialogueTurn& turn = tr.turns[static_cast<std::size_t>(t - 1)];
      AnticipatorExample ex;
      if (t > 1) ex.prev_utterance = stack.encoder->encode_text(tr.turns[static_cast<std::size_t>(t - 2)].user_utterance).vector;
      ex.strategy = stack.strategy_features.row(stack.strategies.index_of(turn.strategy)).transpose();
      ex.persona = stack.persona_bank.row(tr.persona_index).transpose();
      ex.reply = stack.encoder->encode_text(turn.user_utterance).vector;
      ex.turn = t;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

AnticipatorEval evaluate_anticipator(UdpStack& stack, std::span<const AnticipatorExample> examples, int batch,
                                     std::uint64_t seed) {
  AnticipatorEval out;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  int items = 0;
  for (std::size_t start = 0; start + static_cast<std::size_t>(batch) <= order.size();
       start += static_cast<std::size_t>(batch)) {
    std::vector<AnticipatorExample> b;
    for (std::size_t k = start; k < start + static_cast<std::size_t>(batch); ++k) b.push_back(examples[order[k]]);
    nn::Tape tape(false);
    const auto res = contrastive_loss(tape, stack.anticipator, b, stack.max_turns());
    out.loss += tape.value_of(res.loss)(0, 0);
    out.top1 += res.top1;
    items += batch;
    ++out.batches;
  }
  if (out.batches > 0) {
    out.loss /= out.batches;
    out.top1 /= items;
  }
  return out;
}

std::vector<PlanningRecord> planner_records(const UdpStack& stack, std::span<const Transcript> dialogues) {
  ReplayResult replay = replay_transcripts(stack, dialogues, true);
  std::vector<PlanningRecord> out;
  for (auto& recs : replay.records) {
    for (auto& r : recs) out.push_back(std::move(r));
  }
  return out;
}

std::pair<double, double> evaluate_planner(UdpStack& stack, std::span<const PlanningRecord> records) {
  if (records.empty()) return {0.0, 0.0};
  double nll = 0.0;
  int hits = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < records.size(); start += kChunk) {
    const auto chunk = records.subspan(start, std::min(kChunk, records.size() - start));
    nn::Tape tape(false);
    const nn::Matrix& lp = tape.value_of(stack.planner.log_policy(tape, chunk, stack.strategy_features));
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto row = static_cast<Eigen::Index>(b);
      nll -= lp(row, chunk[b].action);
      Eigen::Index best = 0;
      lp.row(row).maxCoeff(&best);
      hits += best == chunk[b].action;
    }
  }
  const double n = static_cast<double>(records.size());
  return {nll / n, hits / n};
}

StageReport pretrain_stage(const std::string& stage, UdpStack& stack, const PretrainCorpus& train,
                           const PretrainCorpus& valid, const PretrainOptions& options, const CheckpointStore* store) {
  require(train.task == stack.task && valid.task == stack.task, ErrorKind::kData, "corpus task differs from the stack");
  require(!train.dialogues.empty() && !valid.dialogues.empty(), ErrorKind::kData, "empty pretraining corpus");
  require(options.steps > 0 && options.batch > 0 && options.eval_every > 0, ErrorKind::kConfiguration,
          "pretraining steps, batch and eval interval must be positive");
  const auto start = Clock::now();
  StageReport report;
  report.stage = stage;
  const nn::ParameterList params = stage_parameters(stack, stage);
  nn::Adam adam(params, nn::AdamOptions{.lr = options.lr, .clip_norm = options.clip});
  Rng rng(derive_seed(options.seed, "pretrain." + stage));

  // Stage data. Upstream stages are frozen here, so planner inputs are fixed.
  std::vector<PortrayerExample> p_train;
  std::vector<AnticipatorExample> a_train, a_valid;
  std::vector<PlanningRecord> r_train, r_valid;
  if (stage == "portrayer") {
    p_train = portrayer_examples(stack, train.dialogues);
  } else if (stage == "anticipator") {
    a_train = anticipator_examples(stack, train.dialogues);
    a_valid = anticipator_examples(stack, valid.dialogues);
    require(a_train.size() >= static_cast<std::size_t>(options.batch), ErrorKind::kData,
            "fewer anticipator examples than one batch");
  } else if (stage == "planner") {
    r_train = planner_records(stack, train.dialogues);
    r_valid = planner_records(stack, valid.dialogues);
  } else {
    fail(ErrorKind::kArgument, "unknown stage '" + stage + "'");
  }

  // Higher is better for every stage metric.
  auto evaluate = [&](long step) {
    ordered_json point{{"step", step}};
    double metric = 0.0;
    if (stage == "portrayer") {
      const PortrayerEval ev = evaluate_portrayer(stack, valid.dialogues);
      point["valid_accuracy"] = ev.accuracy;
      point["valid_final_accuracy"] = ev.final_accuracy;
      point["valid_accuracy_by_turn"] = ev.by_turn;
      metric = ev.accuracy;
    } else if (stage == "anticipator") {
      const AnticipatorEval ev = evaluate_anticipator(stack, a_valid, 16, derive_seed(options.seed, "valid.batches"));
      point["valid_loss"] = ev.loss;
      point["valid_top1_b16"] = ev.top1;
      metric = -ev.loss;
    } else {
      const auto [nll, acc] = evaluate_planner(stack, r_valid);
      point["valid_nll"] = nll;
      point["valid_accuracy"] = acc;
      metric = -nll;
    }
    return std::pair{metric, point};
  };

  auto [best_metric, first_point] = evaluate(0);
  first_point["seconds"] = seconds_since(start);
  report.curve.push_back(first_point);
  long best_step = 0;
  std::vector<nn::Matrix> best_values = snapshot(params);
  AdamState best_adam = save_adam(adam);
  double running = 0.0;
  int running_n = 0;

  for (long step = 1; step <= options.steps; ++step) {
    nn::Tape tape;
    nn::Var loss;
    if (stage == "portrayer") {
      const auto batch = draw_batch(p_train, options.batch, rng);
      loss = portrayer_loss(tape, stack.portrayer, batch, stack.schedule, rng);
    } else if (stage == "anticipator") {
      const auto batch = draw_distinct(a_train, options.batch, rng);
      loss = contrastive_loss(tape, stack.anticipator, batch, stack.max_turns()).loss;
    } else {
      const auto batch = draw_batch(r_train, options.batch, rng);
      loss = supervised_loss(tape, stack.planner, batch, stack.strategy_features);
    }
    const double value = tape.value_of(loss)(0, 0);
    if (!std::isfinite(value)) abort_non_finite(stage, step, value, params, store, stack.task);
    tape.backward(loss);
    const double gnorm = adam.step();
    if (!std::isfinite(gnorm)) abort_non_finite(stage, step, value, params, store, stack.task);
    after_update(stack, stage);
    running += value;
    ++running_n;

    const bool out_of_time =
        options.time_budget_seconds > 0 && seconds_since(start) > options.time_budget_seconds;
    if (step % options.eval_every == 0 || step == options.steps || out_of_time) {
      auto [metric, point] = evaluate(step);
      point["train_loss"] = running / running_n;
      point["seconds"] = seconds_since(start);
      running = 0.0;
      running_n = 0;
      spdlog::info("{} step {}: {}", stage, step, point.dump());
      report.curve.push_back(point);
      if (metric > best_metric) {
        best_metric = metric;
        best_step = step;
        best_values = snapshot(params);
        best_adam = save_adam(adam);
      }
      if (out_of_time) {
        spdlog::warn("{}: time budget reached at step {}", stage, step);
        break;
      }
    }
  }

  restore(params, best_values);
  after_update(stack, stage);
  report.best_step = best_step;
  report.best_metric = best_metric;
  for (const auto& p : report.curve) {
    if (p.at("step").get<long>() == best_step) report.final_metrics = p;
  }
  report.seconds = seconds_since(start);
  if (store != nullptr) {
    json meta{{"config_hash", options.config_hash},
              {"corpus_hash", train.hash()},
              {"valid_corpus_hash", valid.hash()},
              {"metrics", report.final_metrics}};
    nn::Checkpoint ckpt = stage_checkpoint(stack, stage, best_step, meta);
    export_adam(best_adam, params, ckpt);
    report.checkpoint = store->save_best(stack.task, stage, best_step, ckpt);
  }
  return report;
}

// --------------------------------------------------------------------- RL

ActiveSampler::ActiveSampler(int personas, SamplerOptions options)
    : weights_(static_cast<std::size_t>(personas), options.initial_weight), options_(options) {
  require(personas > 0, ErrorKind::kArgument, "sampler needs at least one persona");
  require(std::isfinite(options.beta) && options.beta >= 0, ErrorKind::kConfiguration, "sampler beta must be >= 0");
  require(options.floor > 0, ErrorKind::kConfiguration, "sampler floor must be positive");
}

void ActiveSampler::update(int persona, bool success) {
  require(persona >= 0 && persona < static_cast<int>(weights_.size()), ErrorKind::kArgument,
          "persona index out of range");
  weights_[static_cast<std::size_t>(persona)] += success ? 1.0 : -1.0;
}

std::vector<double> ActiveSampler::probabilities() const {
  std::vector<double> p(weights_.size());
  if (options_.as_written_proportional) {
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = std::max(weights_[j], options_.floor);
  } else {
    const double lo = *std::min_element(weights_.begin(), weights_.end());
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = std::exp(-options_.beta * (weights_[j] - lo));
  }
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= s;
  return p;
}

int ActiveSampler::sample(Rng& rng) const {
  const auto p = probabilities();
  return sample_categorical(p, rng);
}

std::string frozen_hash(UdpStack& stack) {
  nn::ParameterList frozen = stack.portrayer.parameters();
  const nn::ParameterList a = stack.anticipator.parameters();
  frozen.insert(frozen.end(), a.begin(), a.end());
  return nn::parameter_hash(frozen);
}

std::vector<Transcript> simulate_policy(const std::function<std::unique_ptr<Policy>()>& make_policy,
                                        std::span<const UserProfile* const> profiles, const StrategySet& strategies,
                                        const ActorFactory& actors, const EpisodeConfig& episode,
                                        const std::vector<std::string>& situations, std::uint64_t seed, int repeats,
                                        int threads) {
  require(repeats > 0, ErrorKind::kArgument, "repeats must be positive");
  const auto per = static_cast<std::size_t>(repeats);
  std::vector<Transcript> out(profiles.size() * per);
  parallel_for(out.size(), threads, [&](std::size_t idx) {
    const UserProfile& profile = *profiles[idx / per];
    const std::size_t r = idx % per;
    const std::uint64_t ep_seed = derive_seed(derive_seed(seed, profile.profile_id), static_cast<std::uint64_t>(r));
    std::string situation;
    if (!situations.empty()) {
      Rng pick(derive_seed(ep_seed, "situation"));
      situation = situations[std::uniform_int_distribution<std::size_t>(0, situations.size() - 1)(pick)];
    }
    auto policy = make_policy();
    ActorSet set = actors();
    try {
      out[idx] = run_episode(*policy, profile, set, strategies, episode, ep_seed, situation);
    } catch (const EpisodeError& e) {
      spdlog::warn("episode {} ({}) failed: {}", idx, profile.profile_id, e.what());
      out[idx] = e.partial();
    }
  });
  return out;
}

std::vector<Transcript> simulate_agent(const UdpStack& stack, std::span<const UserProfile* const> profiles,
                                       const ActorFactory& actors, const EpisodeConfig& episode,
                                       const std::vector<std::string>& situations, std::uint64_t seed, int repeats,
                                       UdpAgent::Mode mode, int threads) {
  return simulate_policy([&] { return std::make_unique<UdpAgent>(stack, mode); }, profiles, stack.strategies, actors,
                         episode, situations, seed, repeats, threads);
}

RlReport rl_train(UdpStack& stack, const ProfileSet& profiles, const ActorFactory& actors,
                  const EpisodeConfig& episode, const std::vector<std::string>& situations, const RlOptions& options,
                  const CheckpointStore* store) {
  require(options.episodes > 0 && options.eval_every > 0, ErrorKind::kConfiguration,
          "RL episodes and eval interval must be positive");
  const auto start = Clock::now();
  const int M = persona_count(stack.task);
  std::vector<std::vector<const UserProfile*>> by_persona(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j) {
    by_persona[static_cast<std::size_t>(j)] = profiles.select(Split::kTrain, j);
    require(!by_persona[static_cast<std::size_t>(j)].empty(), ErrorKind::kPrecondition,
            "no training profile for persona " + std::to_string(j));
  }
  const auto valid = profiles.select(Split::kValid);
  require(!valid.empty(), ErrorKind::kPrecondition, "no validation profiles for RL evaluation");

  RlReport report;
  report.frozen_hash_before = frozen_hash(stack);
  nn::ParameterList frozen = stack.portrayer.parameters();
  {
    const auto a = stack.anticipator.parameters();
    frozen.insert(frozen.end(), a.begin(), a.end());
  }
  nn::zero_grad(frozen);
  const nn::ParameterList params = stack.planner.parameters();
  nn::Adam adam(params, nn::AdamOptions{.lr = options.lr, .clip_norm = options.clip});
  ActiveSampler sampler(M, options.sampler);
  Rng rng(derive_seed(options.seed, "rl"));
  const std::uint64_t eval_seed = derive_seed(options.seed, "rl.valid");

  auto validate = [&](long ep) {
    const auto ts = simulate_agent(stack, valid, actors, episode, situations, eval_seed, options.eval_repeats,
                                   UdpAgent::Mode::kGreedy, options.threads);
    ordered_json point{{"episode", ep},
                       {"valid_sr", success_rate(ts)},
                       {"valid_ssr", soft_success_rate(ts)},
                       {"valid_avg_turns", avg_turns(ts)},
                       {"seconds", seconds_since(start)}};
    return point;
  };

  ordered_json first = validate(0);
  report.best_valid_ssr = first.at("valid_ssr").get<double>();
  report.best_episode = 0;
  report.curve.push_back(first);
  std::vector<nn::Matrix> best_values = snapshot(params);
  AdamState best_adam = save_adam(adam);
  double window_reward = 0.0;
  int window_success = 0, window_n = 0;

  for (int ep = 1; ep <= options.episodes; ++ep) {
    const int j = sampler.sample(rng);
    const auto& pool = by_persona[static_cast<std::size_t>(j)];
    const UserProfile& profile = *pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    std::string situation;
    if (!situations.empty()) {
      situation = situations[std::uniform_int_distribution<std::size_t>(0, situations.size() - 1)(rng)];
    }
    const std::uint64_t ep_seed = derive_seed(derive_seed(options.seed, "rl.episode"), static_cast<std::uint64_t>(ep));
    UdpAgent agent(stack, UdpAgent::Mode::kSample);
    ActorSet set = actors();
    Transcript tr;
    try {
      tr = run_episode(agent, profile, set, stack.strategies, episode, ep_seed, situation);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kEpisode) throw;
      ++report.failed_episodes;
      spdlog::warn("RL episode {} skipped: {}", ep, e.what());
      if (report.failed_episodes > options.max_failure_rate * options.episodes) {
        fail(ErrorKind::kEpisode, "RL aborted: " + std::to_string(report.failed_episodes) +
                                      " failed episodes exceed the allowed rate");
      }
      continue;
    }
    ++report.episodes;

    std::vector<double> rewards;
    for (const auto& turn : tr.turns) rewards.push_back(turn.reward);
    const auto returns = discounted_returns(rewards, options.gamma, options.reward_to_go);
    const auto& records = agent.records();
    std::vector<int> actions;
    for (const auto& r : records) actions.push_back(r.action);
    nn::Tape tape;
    const nn::Var lp = nn::pick(stack.planner.log_policy(tape, records, stack.strategy_features), actions);
    const nn::Var loss = policy_gradient_loss(lp, returns);
    const double value = tape.value_of(loss)(0, 0);
    if (!std::isfinite(value)) abort_non_finite("rl", ep, value, params, store, stack.task);
    tape.backward(loss);
    adam.step();
    report.frozen_grad_norm = std::max(report.frozen_grad_norm, nn::grad_norm(frozen));

    sampler.update(j, tr.success);
    report.successes += tr.success;
    window_reward += tr.final_reward;
    window_success += tr.success;
    ++window_n;

    if (ep % options.eval_every == 0 || ep == options.episodes) {
      ordered_json point = validate(ep);
      point["train_sr"] = static_cast<double>(window_success) / window_n;
      point["train_ssr"] = window_reward / window_n;
      point["sampler_probabilities"] = sampler.probabilities();
      window_reward = 0.0;
      window_success = window_n = 0;
      spdlog::info("rl episode {}: {}", ep, point.dump());
      const double ssr = point.at("valid_ssr").get<double>();
      report.curve.push_back(std::move(point));
      if (ssr > report.best_valid_ssr) {
        report.best_valid_ssr = ssr;
        report.best_episode = ep;
        best_values = snapshot(params);
        best_adam = save_adam(adam);
      }
    }
  }

  restore(params, best_values);
  report.sampler_weights = sampler.weights();
  report.sampler_probabilities = sampler.probabilities();
  report.frozen_hash_after = frozen_hash(stack);
  require(report.frozen_hash_after == report.frozen_hash_before, ErrorKind::kInvariant,
          "frozen stage parameters changed during RL");
  report.seconds = seconds_since(start);
  if (store != nullptr) {
    json meta{{"config_hash", options.config_hash},
              {"frozen_hash", report.frozen_hash_after},
              {"metrics", {{"best_valid_ssr", report.best_valid_ssr}, {"best_episode", report.best_episode}}},
              {"sampler_weights", report.sampler_weights}};
    nn::Checkpoint ckpt = stage_checkpoint(stack, "planner", report.best_episode, meta);
    ckpt.stage = "planner";
    export_adam(best_adam, params, ckpt);
    report.checkpoint = store->save_best(stack.task, "rl", report.best_episode, ckpt);
  }
  return report;
}

}  // namespace udp
