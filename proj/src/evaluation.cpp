#include "udp/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <spdlog/fmt/fmt.h>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {
namespace {

using nlohmann::ordered_json;

void require_nonempty(std::span<const Transcript> ts, const char* what) {
  require(!ts.empty(), ErrorKind::kArgument, std::string(what) + " of an empty transcript set");
}

GroupMetrics group_metrics(std::string label, const std::vector<const Transcript*>& members) {
  GroupMetrics g;
  g.label = std::move(label);
  g.episodes = static_cast<int>(members.size());
  if (members.empty()) return g;
  double sr = 0, ssr = 0, turns = 0;
  for (const Transcript* t : members) {
    sr += t->success ? 1.0 : 0.0;
    ssr += t->final_reward;
    turns += t->length();
  }
  const double n = static_cast<double>(members.size());
  g.sr = sr / n;
  g.ssr = ssr / n;
  g.avg_turns = turns / n;
  return g;
}

DimensionBreakdown dimension_breakdown(std::string name, std::array<std::string, 2> labels,
                                       const std::array<std::vector<const Transcript*>, 2>& members) {
  DimensionBreakdown d;
  d.dimension = std::move(name);
  for (int o = 0; o < 2; ++o) d.options.push_back(group_metrics(labels[o], members[o]));
  d.delta_sr = std::abs(d.options[0].sr - d.options[1].sr);
  d.delta_ssr = std::abs(d.options[0].ssr - d.options[1].ssr);
  return d;
}

double kl_term(double a, double m) { return a > 0.0 ? a * std::log(a / m) : 0.0; }

void check_simplex(std::span<const double> p) {
  double s = 0.0;
  for (double v : p) {
    require(std::isfinite(v) && v >= 0.0, ErrorKind::kArgument, "distribution has a negative or non-finite entry");
    s += v;
  }
  require(std::abs(s - 1.0) <= 1e-9, ErrorKind::kArgument, "distribution does not sum to one");
}

ordered_json group_json(const GroupMetrics& g) {
  return ordered_json{{"label", g.label}, {"episodes", g.episodes}, {"sr", g.sr}, {"ssr", g.ssr},
                      {"avg_turns", g.avg_turns}};
}

GroupMetrics group_from_json(const nlohmann::json& j) {
  GroupMetrics g;
  g.label = j.at("label").get<std::string>();
  g.episodes = j.at("episodes").get<int>();
  g.sr = j.at("sr").get<double>();
  g.ssr = j.at("ssr").get<double>();
  g.avg_turns = j.at("avg_turns").get<double>();
  return g;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

double success_rate(std::span<const Transcript> transcripts) {
  require_nonempty(transcripts, "success rate");
  double s = 0;
  for (const auto& t : transcripts) s += t.success ? 1.0 : 0.0;
  return s / static_cast<double>(transcripts.size());
}

double soft_success_rate(std::span<const Transcript> transcripts) {
  require_nonempty(transcripts, "soft success rate");
  double s = 0;
  for (const auto& t : transcripts) {
    require(!t.turns.empty(), ErrorKind::kArgument, "transcript " + t.profile_id + " has no final reward");
    s += t.final_reward;
  }
  return s / static_cast<double>(transcripts.size());
}

double avg_turns(std::span<const Transcript> transcripts) {
  require_nonempty(transcripts, "average turns");
  double s = 0;
  for (const auto& t : transcripts) s += t.length();
  return s / static_cast<double>(transcripts.size());
}

PersonaBreakdown per_persona_breakdown(std::span<const Transcript> transcripts, Task task) {
  const auto personas = enumerate_personas(task);
  const auto& dims = persona_dimensions(task);
  std::vector<std::vector<const Transcript*>> by_persona(personas.size());
  for (const auto& t : transcripts) {
    require(t.task == task, ErrorKind::kData, "transcript of another task in the breakdown");
    require(t.persona_index >= 0 && t.persona_index < static_cast<int>(personas.size()), ErrorKind::kData,
            "transcript " + t.profile_id + " lacks a valid persona tag");
    by_persona[static_cast<std::size_t>(t.persona_index)].push_back(&t);
  }
  PersonaBreakdown out;
  for (const auto& p : personas) {
    out.personas.push_back(group_metrics(p.description(), by_persona[static_cast<std::size_t>(p.index)]));
  }
  for (std::size_t d = 0; d < dims.size(); ++d) {
    std::array<std::vector<const Transcript*>, 2> members;
    for (const auto& p : personas) {
      auto& src = by_persona[static_cast<std::size_t>(p.index)];
      auto& dst = members[static_cast<std::size_t>(p.choice[d])];
      dst.insert(dst.end(), src.begin(), src.end());
    }
    out.dimensions.push_back(dimension_breakdown(dims[d].name, dims[d].options, members));
  }
  std::vector<double> dsr, dssr;
  for (const auto& d : out.dimensions) {
    dsr.push_back(d.delta_sr);
    dssr.push_back(d.delta_ssr);
  }
  out.avg_delta_sr = dims.empty() ? 0.0 : average_abs_delta(dsr);
  out.avg_delta_ssr = dims.empty() ? 0.0 : average_abs_delta(dssr);
  if (personas.front().difficulty) {
    std::array<std::vector<const Transcript*>, 2> members;
    for (const auto& p : personas) {
      auto& src = by_persona[static_cast<std::size_t>(p.index)];
      auto& dst = members[*p.difficulty == Difficulty::kHard ? 0 : 1];
      dst.insert(dst.end(), src.begin(), src.end());
    }
    out.dimensions.push_back(dimension_breakdown(
        "difficulty", {std::string(to_string(Difficulty::kHard)), std::string(to_string(Difficulty::kEasy))}, members));
  }
  return out;
}

double average_abs_delta(std::span<const double> deltas) {
  require(!deltas.empty(), ErrorKind::kArgument, "no dimensions to average");
  double s = 0;
  for (double d : deltas) s += std::abs(d);
  return s / static_cast<double>(deltas.size());
}

double js_divergence(std::span<const double> p, std::span<const double> q, double log_base) {
  require(p.size() == q.size() && !p.empty(), ErrorKind::kArgument, "JS divergence needs equal-length vectors");
  check_simplex(p);
  check_simplex(q);
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    js += 0.5 * kl_term(p[i], m) + 0.5 * kl_term(q[i], m);
  }
  js = std::max(js, 0.0);
  if (log_base > 0.0) {
    require(log_base != 1.0, ErrorKind::kArgument, "log base must differ from 1");
    js /= std::log(log_base);
  }
  return js;
}

std::vector<double> strategy_distribution(const Transcript& transcript, const StrategySet& strategies) {
  require(!transcript.turns.empty(), ErrorKind::kArgument, "strategy distribution of an empty dialogue");
  std::vector<double> out(static_cast<std::size_t>(strategies.size()), 0.0);
  for (const auto& turn : transcript.turns) out[static_cast<std::size_t>(strategies.index_of(turn.strategy))] += 1.0;
  for (double& v : out) v /= static_cast<double>(transcript.turns.size());
  return out;
}

IntraInter intra_inter(const std::vector<std::vector<std::vector<double>>>& groups, double log_base) {
  require(groups.size() >= 2, ErrorKind::kArgument, "intra/inter needs at least two persona groups");
  IntraInter out;
  double intra_sum = 0.0;
  long intra_pairs = 0;
  std::vector<std::vector<double>> means;
  for (const auto& g : groups) {
    require(g.size() >= 2, ErrorKind::kArgument, "intra/inter needs two episodes per persona group");
    for (std::size_t a = 0; a < g.size(); ++a) {
      for (std::size_t b = a + 1; b < g.size(); ++b) {
        intra_sum += js_divergence(g[a], g[b], log_base);
        ++intra_pairs;
      }
    }
    std::vector<double> mean(g.front().size(), 0.0);
    for (const auto& d : g) {
      require(d.size() == mean.size(), ErrorKind::kArgument, "distributions differ in length");
      for (std::size_t k = 0; k < d.size(); ++k) mean[k] += d[k];
    }
    for (double& v : mean) v /= static_cast<double>(g.size());
    // Renormalize away rounding drift before the simplex check.
    double s = 0;
    for (double v : mean) s += v;
    for (double& v : mean) v /= s;
    means.push_back(std::move(mean));
  }
  double inter_sum = 0.0;
  long inter_pairs = 0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      inter_sum += js_divergence(means[a], means[b], log_base);
      ++inter_pairs;
    }
  }
  out.intra = intra_sum / static_cast<double>(intra_pairs);
  out.inter = inter_sum / static_cast<double>(inter_pairs);
  return out;
}

AccuracySeries persona_accuracy_by_turn(std::span<const Transcript> transcripts, int max_turns) {
  AccuracySeries s;
  std::vector<int> hits(static_cast<std::size_t>(std::max(max_turns - 1, 0)), 0);
  s.counts.assign(hits.size(), 0);
  for (const auto& t : transcripts) {
    for (const auto& turn : t.turns) {
      if (!turn.predicted_persona || turn.turn < 2 || turn.turn > max_turns) continue;
      const auto k = static_cast<std::size_t>(turn.turn - 2);
      ++s.counts[k];
      if (*turn.predicted_persona == t.persona_index) ++hits[k];
    }
  }
  s.accuracy.resize(hits.size(), 0.0);
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (s.counts[k] > 0) s.accuracy[k] = static_cast<double>(hits[k]) / s.counts[k];
  }
  return s;
}

EvalReport evaluate_transcripts(std::span<const Transcript> transcripts, const StrategySet& strategies,
                                const std::string& config_hash, std::uint64_t seed, int max_turns) {
  require_nonempty(transcripts, "evaluation");
  EvalReport r;
  r.task = transcripts.front().task;
  require(strategies.task() == r.task, ErrorKind::kData, "strategy set belongs to another task");
  r.backend = transcripts.front().backend;
  r.policy = transcripts.front().policy;
  for (const auto& t : transcripts) {
    if (t.backend != r.backend) r.backend = "mixed";
    if (t.policy != r.policy) r.policy = "mixed";
  }
  r.episodes = static_cast<int>(transcripts.size());
  r.sr = success_rate(transcripts);
  r.ssr = soft_success_rate(transcripts);
  r.avg_turns = avg_turns(transcripts);
  r.breakdown = per_persona_breakdown(transcripts, r.task);

  std::map<int, std::vector<std::vector<double>>> groups;
  for (const auto& t : transcripts) groups[t.persona_index].push_back(strategy_distribution(t, strategies));
  std::vector<std::vector<std::vector<double>>> usable;
  for (auto& [_, g] : groups) {
    if (g.size() >= 2) usable.push_back(std::move(g));
  }
  if (usable.size() >= 2) r.divergence = intra_inter(usable);

  r.persona_accuracy = persona_accuracy_by_turn(transcripts, max_turns);
  r.config_hash = config_hash;
  r.seed = seed;
  r.transcripts_hash = transcripts_hash(transcripts);
  return r;
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  ordered_json j;
  j["schema_version"] = r.schema_version;
  j["task"] = std::string(to_string(r.task));
  j["backend"] = r.backend;
  j["policy"] = r.policy;
  j["episodes"] = r.episodes;
  j["sr"] = r.sr;
  j["ssr"] = r.ssr;
  j["avg_turns"] = r.avg_turns;
  ordered_json personas = ordered_json::array();
  for (const auto& g : r.breakdown.personas) personas.push_back(group_json(g));
  j["personas"] = std::move(personas);
  ordered_json dims = ordered_json::array();
  for (const auto& d : r.breakdown.dimensions) {
    ordered_json opts = ordered_json::array();
    for (const auto& g : d.options) opts.push_back(group_json(g));
    dims.push_back(ordered_json{
        {"dimension", d.dimension}, {"options", std::move(opts)}, {"delta_sr", d.delta_sr}, {"delta_ssr", d.delta_ssr}});
  }
  j["dimensions"] = std::move(dims);
  j["avg_delta_sr"] = r.breakdown.avg_delta_sr;
  j["avg_delta_ssr"] = r.breakdown.avg_delta_ssr;
  if (r.divergence) {
    j["intra"] = r.divergence->intra;
    j["inter"] = r.divergence->inter;
  } else {
    j["intra"] = nullptr;
    j["inter"] = nullptr;
  }
  j["persona_accuracy_by_turn"] = r.persona_accuracy.accuracy;
  j["persona_accuracy_counts"] = r.persona_accuracy.counts;
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  j["transcripts_hash"] = r.transcripts_hash;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.schema_version = j.at("schema_version").get<int>();
    require(r.schema_version == kReportSchemaVersion, ErrorKind::kParse, "unsupported report schema version");
    r.task = parse_task(j.at("task").get<std::string>());
    r.backend = j.at("backend").get<std::string>();
    r.policy = j.at("policy").get<std::string>();
    r.episodes = j.at("episodes").get<int>();
    r.sr = j.at("sr").get<double>();
    r.ssr = j.at("ssr").get<double>();
    r.avg_turns = j.at("avg_turns").get<double>();
    for (const auto& g : j.at("personas")) r.breakdown.personas.push_back(group_from_json(g));
    for (const auto& d : j.at("dimensions")) {
      DimensionBreakdown db;
      db.dimension = d.at("dimension").get<std::string>();
      for (const auto& g : d.at("options")) db.options.push_back(group_from_json(g));
      db.delta_sr = d.at("delta_sr").get<double>();
      db.delta_ssr = d.at("delta_ssr").get<double>();
      r.breakdown.dimensions.push_back(std::move(db));
    }
    r.breakdown.avg_delta_sr = j.at("avg_delta_sr").get<double>();
    r.breakdown.avg_delta_ssr = j.at("avg_delta_ssr").get<double>();
    if (!j.at("intra").is_null()) r.divergence = IntraInter{j.at("intra").get<double>(), j.at("inter").get<double>()};
    r.persona_accuracy.accuracy = j.at("persona_accuracy_by_turn").get<std::vector<double>>();
    r.persona_accuracy.counts = j.at("persona_accuracy_counts").get<std::vector<int>>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.transcripts_hash = j.at("transcripts_hash").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("report: ") + e.what());
  }
}

void emit_report(const EvalReport& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, ErrorKind::kIo, "cannot create report directory " + out_dir.string() + ": " + ec.message());

  write_file(out_dir / "report.json", to_json(r).dump(2) + "\n");

  std::string personas = "persona_index,persona,episodes,sr,ssr,avg_turns\n";
  for (std::size_t i = 0; i < r.breakdown.personas.size(); ++i) {
    const auto& g = r.breakdown.personas[i];
    personas += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f}\n", i, csv_field(g.label), g.episodes, g.sr, g.ssr,
                            g.avg_turns);
  }
  write_file(out_dir / "personas.csv", personas);

  std::string dims = "dimension,option_a,option_b,sr_a,sr_b,ssr_a,ssr_b,delta_sr,delta_ssr\n";
  for (const auto& d : r.breakdown.dimensions) {
    dims += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", csv_field(d.dimension),
                        csv_field(d.options[0].label), csv_field(d.options[1].label), d.options[0].sr,
                        d.options[1].sr, d.options[0].ssr, d.options[1].ssr, d.delta_sr, d.delta_ssr);
  }
  dims += fmt::format("average,,,,,,,{:.6f},{:.6f}\n", r.breakdown.avg_delta_sr, r.breakdown.avg_delta_ssr);
  write_file(out_dir / "dimensions.csv", dims);

  std::string acc = "turn,accuracy,count\n";
  for (std::size_t k = 0; k < r.persona_accuracy.accuracy.size(); ++k) {
    acc += fmt::format("{},{:.6f},{}\n", k + 1, r.persona_accuracy.accuracy[k], r.persona_accuracy.counts[k]);
  }
  write_file(out_dir / "persona_accuracy_by_turn.csv", acc);

  std::string bars = "dimension,option,episodes,sr,ssr\n";
  for (const auto& d : r.breakdown.dimensions) {
    for (const auto& g : d.options) {
      bars += fmt::format("{},{},{},{:.6f},{:.6f}\n", csv_field(d.dimension), csv_field(g.label), g.episodes, g.sr,
                          g.ssr);
    }
  }
  write_file(out_dir / "trait_option_bars.csv", bars);
}

}  // namespace udp
