#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "udp/harness.hpp"
#include "udp/persona.hpp"
#include "udp/strategy.hpp"

namespace udp {

inline constexpr int kReportSchemaVersion = 1;

double success_rate(std::span<const Transcript> transcripts);
/// Mean final-turn reward.
double soft_success_rate(std::span<const Transcript> transcripts);
double avg_turns(std::span<const Transcript> transcripts);

struct GroupMetrics {
  std::string label;
  int episodes = 0;
  double sr = 0.0;
  double ssr = 0.0;
  double avg_turns = 0.0;
};

/// Both options of one persona dimension and their absolute gaps.
struct DimensionBreakdown {
  std::string dimension;
  std::vector<GroupMetrics> options;
  double delta_sr = 0.0;
  double delta_ssr = 0.0;
};

struct PersonaBreakdown {
  /// One row per persona in canonical order; personas without episodes have episodes = 0.
  std::vector<GroupMetrics> personas;
  /// Trait dimensions, then difficulty for P4G.
  std::vector<DimensionBreakdown> dimensions;
  /// Mean |delta| over the trait dimensions (difficulty excluded).
  double avg_delta_sr = 0.0;
  double avg_delta_ssr = 0.0;
};

PersonaBreakdown per_persona_breakdown(std::span<const Transcript> transcripts, Task task);

/// Mean of absolute per-dimension gaps.
double average_abs_delta(std::span<const double> deltas);

/// Jensen-Shannon divergence; `log_base` <= 0 means natural log.
double js_divergence(std::span<const double> p, std::span<const double> q, double log_base = 0.0);

/// Normalized strategy usage of one episode, from the logged strategy ids.
std::vector<double> strategy_distribution(const Transcript& transcript, const StrategySet& strategies);

struct IntraInter {
  double intra = 0.0;
  double inter = 0.0;
};

/// groups[g][e] is episode e's distribution in persona group g.
IntraInter intra_inter(const std::vector<std::vector<std::vector<double>>>& groups, double log_base = 0.0);

struct AccuracySeries {
  /// accuracy[k-1]: argmax D_k against the gold persona, k = 1..T-1.
  std::vector<double> accuracy;
  std::vector<int> counts;
};

/// From the predicted personas logged at each decision (decision t uses D_(t-1)).
AccuracySeries persona_accuracy_by_turn(std::span<const Transcript> transcripts, int max_turns = 10);

struct EvalReport {
  int schema_version = kReportSchemaVersion;
  Task task = Task::kP4G;
  std::string backend;
  std::string policy;
  int episodes = 0;
  double sr = 0.0;
  double ssr = 0.0;
  double avg_turns = 0.0;
  PersonaBreakdown breakdown;
  std::optional<IntraInter> divergence;
  AccuracySeries persona_accuracy;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string transcripts_hash;
};

EvalReport evaluate_transcripts(std::span<const Transcript> transcripts, const StrategySet& strategies,
                                const std::string& config_hash, std::uint64_t seed, int max_turns = 10);

nlohmann::ordered_json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// report.json, personas.csv (header + one row per persona), dimensions.csv,
/// persona_accuracy_by_turn.csv and trait_option_bars.csv.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

}  // namespace udp
