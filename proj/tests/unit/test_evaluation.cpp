#include <doctest.h>

#include <cmath>
#include <fstream>

#include "udp/error.hpp"
#include "udp/evaluation.hpp"
#include "udp/persona.hpp"
#include "udp/strategy.hpp"
#include "udp/util.hpp"

using namespace udp;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kInvariant;
}

Transcript episode(int persona, bool success, double final_reward, int length,
                   const std::vector<std::string>& strategies = {}) {
  Transcript t;
  t.task = Task::kP4G;
  t.persona_index = persona;
  t.profile_id = "p" + std::to_string(persona);
  t.success = success;
  t.final_reward = final_reward;
  for (int k = 1; k <= length; ++k) {
    DialogueTurn turn;
    turn.turn = k;
    turn.strategy = strategies.empty() ? "logical_appeal" : strategies[(k - 1) % strategies.size()];
    turn.reward = k == length ? final_reward : -0.5;
    t.turns.push_back(turn);
  }
  return t;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("success rate, soft success rate and average turns") {
  const std::vector<Transcript> sfs{episode(0, true, 1.0, 3), episode(1, false, 0.3, 10), episode(2, true, 0.7, 5)};
  CHECK(success_rate(sfs) == doctest::Approx(2.0 / 3));
  CHECK(soft_success_rate(sfs) == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(avg_turns(sfs) == doctest::Approx(6.0));
  const std::vector<Transcript> capped{episode(0, false, -1, 10), episode(0, true, 1, 10)};
  CHECK(avg_turns(capped) == 10.0);
  const std::vector<Transcript> short_ones{episode(0, true, 1, 1), episode(0, true, 1, 3)};
  CHECK(avg_turns(short_ones) == 2.0);
  CHECK(success_rate(short_ones) == 1.0);
  CHECK(success_rate(std::vector<Transcript>{episode(0, false, -1, 10)}) == 0.0);
  CHECK(soft_success_rate(std::vector<Transcript>{episode(0, true, 0.55, 2)}) == doctest::Approx(0.55));
  CHECK(soft_success_rate(capped) == 0.0);
  const std::vector<Transcript> none;
  CHECK(kind_of([&] { success_rate(none); }) == ErrorKind::kArgument);
  CHECK(kind_of([&] { soft_success_rate(none); }) == ErrorKind::kArgument);
  CHECK(kind_of([&] { avg_turns(none); }) == ErrorKind::kArgument);
}

TEST_CASE("absolute gaps and their average match reference values") {
  // Reference option values and gaps, with their rounded averages.
  CHECK(std::abs(0.490 - 0.303) == doctest::Approx(0.187));
  CHECK(std::abs(0.673 - 0.120) == doctest::Approx(0.553));
  CHECK(std::abs(0.362 - 0.431) == doctest::Approx(0.069));
  const std::vector<std::pair<std::vector<double>, double>> columns{
      {{0.187, 0.553, 0.069}, 0.270}, {{0.100, 0.400, 0.050}, 0.183},
      {{0.118, 0.606, 0.068}, 0.264}, {{0.025, 0.475, 0.075}, 0.192},
      {{0.326, 0.532, 0.411}, 0.423}, {{0.262, 0.477, 0.308}, 0.349}};
  for (const auto& [deltas, expected] : columns) {
    CHECK(std::round(average_abs_delta(deltas) * 1000) / 1000 == doctest::Approx(expected));
  }
}

TEST_CASE("per-persona breakdown aggregates by option and dimension") {
  std::vector<Transcript> ts;
  for (int j = 0; j < 16; ++j) {
    const auto p = persona_at(Task::kP4G, j);
    for (int e = 0; e < 4; ++e) {
      const bool ok = (p.choice[0] == 0 && e < 3) || (p.choice[0] == 1 && e < 1);
      ts.push_back(episode(j, ok, ok ? 1.0 : -0.5, ok ? 3 : 10));
    }
  }
  const auto b = per_persona_breakdown(ts, Task::kP4G);
  REQUIRE(b.personas.size() == 16);
  REQUIRE(b.dimensions.size() == 4);
  CHECK(b.dimensions[0].delta_sr == doctest::Approx(0.5));
  CHECK(b.dimensions[1].delta_sr == doctest::Approx(0.0));
  CHECK(b.dimensions[2].delta_sr == doctest::Approx(0.0));
  CHECK(b.dimensions[3].dimension == "difficulty");
  CHECK(b.avg_delta_sr == doctest::Approx(0.5 / 3));
  CHECK(b.avg_delta_ssr == doctest::Approx(std::abs((0.75 - 0.125) - (0.25 - 0.375)) / 3));

  // Per-persona SRs weighted by episode counts give the overall SR.
  double weighted = 0.0;
  int total = 0;
  for (const auto& g : b.personas) {
    weighted += g.sr * g.episodes;
    total += g.episodes;
  }
  CHECK(weighted / total == doctest::Approx(success_rate(ts)));

  auto bad = ts;
  bad[3].persona_index = 16;
  CHECK(kind_of([&] { per_persona_breakdown(bad, Task::kP4G); }) == ErrorKind::kData);
}

TEST_CASE("identical option metrics give zero gaps") {
  std::vector<Transcript> ts;
  for (int j = 0; j < 8; ++j) {
    auto t = episode(j, true, 1.0, 2);
    t.task = Task::kESConv;
    ts.push_back(t);
  }
  const auto b = per_persona_breakdown(ts, Task::kESConv);
  CHECK(b.dimensions.size() == 3);
  for (const auto& d : b.dimensions) {
    CHECK(d.delta_sr == 0.0);
    CHECK(d.delta_ssr == 0.0);
  }
}

TEST_CASE("js divergence in natural log") {
  const std::vector<double> half{0.5, 0.5}, one{1.0, 0.0}, other{0.0, 1.0};
  CHECK(js_divergence(half, half) == 0.0);
  CHECK(js_divergence(half, one) == doctest::Approx(0.2158).epsilon(1e-4));
  CHECK(js_divergence(half, one) == doctest::Approx(0.5 * std::log(2.0 / 1.5) + 0.5 * (0.5 * std::log(0.5 / 0.25) +
                                                                                       0.5 * std::log(0.5 / 0.75))));
  CHECK(js_divergence(one, other) == doctest::Approx(std::log(2.0)));
  CHECK(js_divergence(one, other, 2.0) == doctest::Approx(1.0));
  CHECK(kind_of([&] { js_divergence(half, std::vector<double>{0.7, 0.7}); }) == ErrorKind::kArgument);
  CHECK(kind_of([&] { js_divergence(half, std::vector<double>{1.5, -0.5}); }) == ErrorKind::kArgument);
  CHECK(kind_of([&] { js_divergence(half, std::vector<double>{1.0}); }) == ErrorKind::kArgument);
}

TEST_CASE("js divergence is symmetric and bounded on random simplices") {
  Rng rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(6), q(6);
    double sp = 0, sq = 0;
    for (int k = 0; k < 6; ++k) {
      p[k] = u(rng) < 0.2 ? 0.0 : u(rng);
      q[k] = u(rng) < 0.2 ? 0.0 : u(rng);
      sp += p[k];
      sq += q[k];
    }
    if (sp == 0 || sq == 0) continue;
    for (int k = 0; k < 6; ++k) {
      p[k] /= sp;
      q[k] /= sq;
    }
    const double a = js_divergence(p, q), b = js_divergence(q, p);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    CHECK(a >= 0.0);
    CHECK(a <= std::log(2.0) + 1e-12);
  }
}

TEST_CASE("intra and inter divergence") {
  const std::vector<double> a{1, 0, 0, 0}, b{0, 0, 0.5, 0.5};
  const std::vector<std::vector<std::vector<double>>> same{{a, a}, {a, a, a}};
  const auto s = intra_inter(same);
  CHECK(s.intra == 0.0);
  CHECK(s.inter == 0.0);
  const std::vector<std::vector<std::vector<double>>> disjoint{{a, a, a}, {b, b}};
  const auto d = intra_inter(disjoint);
  CHECK(d.intra == 0.0);
  CHECK(d.inter == doctest::Approx(std::log(2.0)));
  const std::vector<double> c{0.5, 0.5, 0, 0};
  const std::vector<std::vector<std::vector<double>>> mixed{{a, c, b}, {b, c}};
  const std::vector<std::vector<std::vector<double>>> permuted{{c, b}, {b, a, c}};
  const auto m1 = intra_inter(mixed), m2 = intra_inter(permuted);
  CHECK(m1.intra == doctest::Approx(m2.intra).epsilon(1e-14));
  CHECK(m1.inter == doctest::Approx(m2.inter).epsilon(1e-14));
  // Intra pools all within-group pairs: 3 pairs in the first group, 1 in the second.
  const double expect = (js_divergence(a, c) + js_divergence(a, b) + js_divergence(c, b) + js_divergence(b, c)) / 4;
  CHECK(m1.intra == doctest::Approx(expect));
  CHECK(kind_of([&] { intra_inter({{a, a}}); }) == ErrorKind::kArgument);
  CHECK(kind_of([&] { intra_inter({{a, a}, {b}}); }) == ErrorKind::kArgument);
}

TEST_CASE("strategy distributions come from logged ids") {
  const auto strategies = StrategySet::load_default(Task::kP4G);
  const auto t = episode(0, false, -1, 4, {strategies.at(0).id, strategies.at(2).id});
  const auto d = strategy_distribution(t, strategies);
  CHECK(d.size() == static_cast<std::size_t>(strategies.size()));
  CHECK(d[0] == 0.5);
  CHECK(d[2] == 0.5);
  auto bad = t;
  bad.turns[1].strategy = "bribery";
  CHECK_THROWS_AS(strategy_distribution(bad, strategies), Error);
}

TEST_CASE("persona accuracy by turn reads the predictions logged before each decision") {
  auto t = episode(3, false, -1, 10);
  for (int k = 0; k < 10; ++k) {
    if (k > 0) t.turns[k].predicted_persona = k >= 5 ? 3 : 1;
  }
  auto u = t;
  u.persona_index = 1;
  const std::vector<Transcript> ts{t, u};
  const auto s = persona_accuracy_by_turn(ts, 10);
  REQUIRE(s.accuracy.size() == 9);
  for (int k = 1; k <= 9; ++k) {
    CHECK(s.counts[k - 1] == 2);
    CHECK(s.accuracy[k - 1] == doctest::Approx(0.5));
  }
}

TEST_CASE("reports round trip and emit idempotent files") {
  const auto strategies = StrategySet::load_default(Task::kP4G);
  std::vector<Transcript> ts;
  for (int j = 0; j < 16; ++j) {
    for (int e = 0; e < 2; ++e) {
      ts.push_back(episode(j, (j + e) % 3 == 0, (j + e) % 3 == 0 ? 1.0 : -0.3, 2 + (j + e) % 8,
                           {strategies.at(j % 4).id, strategies.at((j + e) % 5).id}));
    }
  }
  const auto report = evaluate_transcripts(ts, strategies, "cfg", 9);
  CHECK(report.episodes == 32);
  CHECK(report.divergence.has_value());
  CHECK(report.sr >= 0.0);
  CHECK(report.sr <= 1.0);
  const auto back = report_from_json(to_json(report));
  CHECK(to_json(back).dump() == to_json(report).dump());
  CHECK(back.sr == report.sr);
  CHECK(back.divergence->inter == report.divergence->inter);

  const auto dir = std::filesystem::temp_directory_path() / "udp_unit_report";
  std::filesystem::remove_all(dir);
  emit_report(report, dir);
  CHECK(count_lines(dir / "personas.csv") == 17);
  for (const char* f : {"report.json", "dimensions.csv", "persona_accuracy_by_turn.csv", "trait_option_bars.csv"}) {
    CHECK(std::filesystem::exists(dir / f));
  }
  const auto first = read_file(dir / "report.json") + read_file(dir / "personas.csv");
  emit_report(evaluate_transcripts(ts, strategies, "cfg", 9), dir);
  CHECK(read_file(dir / "report.json") + read_file(dir / "personas.csv") == first);

  // Metrics ignore episode order.
  auto shuffled = ts;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto r2 = evaluate_transcripts(shuffled, strategies, "cfg", 9);
  CHECK(r2.sr == doctest::Approx(report.sr));
  CHECK(r2.ssr == doctest::Approx(report.ssr));
  CHECK(r2.avg_turns == doctest::Approx(report.avg_turns));
  CHECK(r2.divergence->intra == doctest::Approx(report.divergence->intra));

  CHECK_THROWS_AS(emit_report(report, "/proc/udp_not_writable"), Error);
}
