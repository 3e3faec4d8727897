#include <doctest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "udp/cli.hpp"
#include "udp/error.hpp"
#include "udp/util.hpp"

using namespace udp;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "udp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path workdir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("udp_cli_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Small ESConv run config: narrow models and a few steps per stage.
std::filesystem::path small_config(const std::filesystem::path& dir) {
  const nlohmann::json cfg = {
      {"task", "esconv"},
      {"seed", 3},
      {"paths", {{"root", (dir / "runs").string()}}},
      {"encoder", {{"dim", 64}}},
      {"portrayer", {{"hidden", 64}, {"step_features", 16}}},
      {"anticipator", {{"dz", 32}, {"hidden", 64}}},
      {"planner", {{"layers", 1}, {"heads", 2}}},
      {"corpus", {{"dialogues_per_profile", 2}}},
      {"pretrain",
       {{"portrayer", {{"steps", 20}, {"batch", 16}, {"eval_every", 10}, {"lr", 1e-3}}},
        {"anticipator", {{"steps", 20}, {"batch", 16}, {"eval_every", 10}, {"lr", 1e-3}}},
        {"planner", {{"steps", 20}, {"batch", 16}, {"eval_every", 10}, {"lr", 1e-3}}}}},
      {"rl", {{"episodes", 8}, {"eval_every", 4}, {"lr", 1e-4}}},
      {"log_level_unused_marker", nullptr}};
  auto trimmed = cfg;
  trimmed.erase("log_level_unused_marker");
  const auto path = dir / "config.json";
  write_file(path, trimmed.dump(2));
  return path;
}

}  // namespace

TEST_CASE("exit codes follow the error class") {
  CHECK(exit_code_for(ErrorKind::kConfiguration) == 2);
  CHECK(exit_code_for(ErrorKind::kArgument) == 2);
  CHECK(exit_code_for(ErrorKind::kPrecondition) == 3);
  CHECK(exit_code_for(ErrorKind::kParse) == 4);
  CHECK(exit_code_for(ErrorKind::kTransport) == 5);
  CHECK(exit_code_for(ErrorKind::kInvariant) == 6);
}

TEST_CASE("unknown flags and subcommands exit 2 with usage text") {
  const auto a = cli({"--task", "p4g", "simulate", "--frobnicate"});
  CHECK(a.code == 2);
  CHECK(a.err.find("Usage") != std::string::npos);
  const auto b = cli({"dance"});
  CHECK(b.code == 2);
  CHECK(b.err.find("Usage") != std::string::npos);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("invalid configs exit 2 and list the problems") {
  const auto dir = workdir("badcfg");
  write_file(dir / "c.json", R"({"task": "p4g", "typo": 1, "rl": {"gama": 0.9}})");
  const auto r = cli({"--config", (dir / "c.json").string(), "--log-level", "off", "generate-profiles"});
  CHECK(r.code == 2);
  CHECK(r.err.find("typo") != std::string::npos);
  CHECK(r.err.find("rl.gama") != std::string::npos);
  write_file(dir / "t.json", R"({"task": "p4g", "diffusion": {"T": 7}})");
  const auto t = cli({"--config", (dir / "t.json").string(), "--log-level", "off", "generate-profiles"});
  CHECK(t.code == 2);
  CHECK(t.err.find("multiple of diffusion.T") != std::string::npos);
  write_file(dir / "d.json", R"({"task": "p4g", "task": "esconv"})");
  CHECK(cli({"--config", (dir / "d.json").string(), "generate-profiles"}).code == 2);
}

TEST_CASE("train-rl without checkpoints names the missing stage") {
  const auto dir = workdir("norl");
  const auto cfg = small_config(dir);
  REQUIRE(cli({"--config", cfg.string(), "--log-level", "off", "generate-profiles"}).code == 0);
  const auto r = cli({"--config", cfg.string(), "--log-level", "off", "train-rl"});
  CHECK(r.code == 3);
  CHECK(r.err.find("precondition") != std::string::npos);
  CHECK(r.err.find("portrayer") != std::string::npos);
}

TEST_CASE("the full pipeline runs end to end and evaluation is reproducible") {
  const auto dir = workdir("pipeline");
  const auto cfg = small_config(dir);
  const std::string c = cfg.string();
  const auto base = std::vector<std::string>{"--config", c, "--log-level", "off"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  };
  REQUIRE(with({"generate-profiles"}).code == 0);
  REQUIRE(with({"build-corpus"}).code == 0);
  CHECK(std::filesystem::exists(dir / "runs" / "ESConv" / "corpus" / "train.jsonl"));
  const auto pre = with({"pretrain", "--stage", "all"});
  REQUIRE_MESSAGE(pre.code == 0, pre.err);
  for (const char* stage : {"portrayer", "anticipator", "planner"}) {
    CHECK(std::filesystem::exists(dir / "runs" / "checkpoints" / "ESConv" / stage / "best"));
  }
  const auto rl = with({"train-rl"});
  REQUIRE_MESSAGE(rl.code == 0, rl.err);

  const auto t1 = dir / "t1.jsonl", t2 = dir / "t2.jsonl";
  REQUIRE(with({"simulate", "--out", t1.string()}).code == 0);
  REQUIRE(with({"simulate", "--out", t2.string()}).code == 0);
  CHECK(read_file(t1) == read_file(t2));
  const auto r1 = dir / "r1", r2 = dir / "r2";
  REQUIRE(with({"evaluate", "--transcripts", t1.string(), "--out", r1.string()}).code == 0);
  REQUIRE(with({"evaluate", "--transcripts", t2.string(), "--out", r2.string()}).code == 0);
  CHECK(read_file(r1 / "report.json") == read_file(r2 / "report.json"));
  CHECK(std::filesystem::exists(r1 / "personas.csv"));

  const auto rep = cli({"report", "--in", r1.string()});
  CHECK(rep.code == 0);
  CHECK(rep.out.find("SR") != std::string::npos);

  const auto u = dir / "uniform.jsonl";
  CHECK(with({"simulate", "--policy", "uniform", "--out", u.string()}).code == 0);
  CHECK(with({"evaluate", "--transcripts", u.string(), "--out", (dir / "ru").string()}).code == 0);
}

TEST_CASE("evaluate rejects malformed transcripts with a data-class exit code") {
  const auto dir = workdir("badts");
  write_file(dir / "t.jsonl", "{\"not\": \"a transcript\"}\n");
  const auto r = cli({"--task", "p4g", "--log-level", "off", "evaluate", "--transcripts", (dir / "t.jsonl").string(),
                      "--out", (dir / "r").string()});
  CHECK(r.code == 4);
}
