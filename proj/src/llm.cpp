#include "udp/llm.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "udp/error.hpp"
#include "udp/strategy.hpp"
#include "udp/util.hpp"

// Included last: resolv.h defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

namespace udp {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

class HttplibTransport final : public HttpTransport {
 public:
  HttpResponse post(const std::string& base_url, const std::string& path, const std::string& body,
                    const HttpHeaders& headers, double timeout_seconds) override {
    httplib::Client client(base_url);
    require(client.is_valid(), ErrorKind::kConfiguration, "unsupported endpoint URL " + base_url);
    const auto whole = static_cast<time_t>(timeout_seconds);
    const auto micros = static_cast<time_t>((timeout_seconds - static_cast<double>(whole)) * 1e6);
    client.set_connection_timeout(whole, micros);
    client.set_read_timeout(whole, micros);
    client.set_write_timeout(whole, micros);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) fail(ErrorKind::kTransport, "request to " + base_url + path + " failed: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }
};

bool retryable_status(int status) { return status == 429 || (status >= 500 && status < 600); }

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string fill(std::string text, const std::vector<std::pair<std::string, std::string>>& values) {
  for (const auto& [key, value] : values) {
    const std::string token = "{" + key + "}";
    for (auto pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + value.size())) {
      text.replace(pos, token.size(), value);
    }
  }
  return text;
}

std::string transcript_text(const DialogueContext& ctx) {
  std::string out;
  for (const auto& line : ctx.history_lines()) out += line + "\n";
  return out;
}

std::string option_list(Task task) {
  std::string out;
  for (const auto& o : option_vocabulary(task)) out += (out.empty() ? "" : ", ") + o;
  return out;
}

/// Shared per-episode data for the three LLM actors.
struct LlmEpisode {
  const UserProfile* profile = nullptr;
};

class LlmSystem final : public SystemActor {
 public:
  LlmSystem(ChatModel& model, const PromptSet& prompts) : model_(model), prompts_(prompts) {}
  void begin(const DialogueContext&, std::uint64_t) override {}
  std::string respond(const DialogueContext& ctx, int strategy) override {
    const Strategy& s = ctx.strategies->at(strategy);
    ChatRequest req;
    req.temperature = 0.0;
    req.messages = {{"system", fill(prompts_.system, {{"strategy_name", s.name},
                                                      {"strategy_description", s.description},
                                                      {"history", transcript_text(ctx)},
                                                      {"role", std::string(system_role_name(ctx.task))}})}};
    const auto out = model_.complete(req);
    require(out.size() == 1 && !out.front().empty(), ErrorKind::kProtocol, "system actor returned no text");
    return out.front();
  }

 private:
  ChatModel& model_;
  PromptSet prompts_;
};

class LlmUser final : public UserActor {
 public:
  LlmUser(ChatModel& model, const PromptSet& prompts, std::shared_ptr<LlmEpisode> ep)
      : model_(model), prompts_(prompts), ep_(std::move(ep)) {}
  void begin(const UserProfile& profile, const DialogueContext&, std::uint64_t) override { ep_->profile = &profile; }
  std::string respond(const DialogueContext& ctx, const std::string& system_utterance, int) override {
    ChatRequest req;
    req.temperature = 0.7;
    req.messages = {{"system", fill(prompts_.user, {{"profile", ep_->profile->profile_text},
                                                    {"situation", ctx.situation},
                                                    {"history", transcript_text(ctx)},
                                                    {"system_utterance", system_utterance},
                                                    {"role", std::string(user_role_name(ctx.task))}})}};
    const auto out = model_.complete(req);
    require(out.size() == 1 && !out.front().empty(), ErrorKind::kProtocol, "user actor returned no text");
    return out.front();
  }

 private:
  ChatModel& model_;
  PromptSet prompts_;
  std::shared_ptr<LlmEpisode> ep_;
};

class LlmCritic final : public Critic {
 public:
  LlmCritic(ChatModel& model, const PromptSet& prompts, CriticConfig config)
      : model_(model), prompts_(prompts), config_(config) {}
  void begin(const UserProfile&, const DialogueContext&, std::uint64_t) override {}
  std::vector<std::string> judge(const DialogueContext& ctx) override {
    ChatRequest req;
    req.temperature = config_.temperature;
    req.n = config_.samples;
    req.messages = {{"user", fill(prompts_.critic, {{"history", transcript_text(ctx)},
                                                    {"question", critic_question(ctx.task)},
                                                    {"options", option_list(ctx.task)}})}};
    const auto out = model_.complete(req);
    require(static_cast<int>(out.size()) == config_.samples, ErrorKind::kProtocol,
            "critic returned " + std::to_string(out.size()) + " choices, expected " + std::to_string(config_.samples));
    std::vector<std::string> labels;
    for (const auto& reply : out) labels.push_back(parse_critic_option(reply, ctx.task));
    return labels;
  }

 private:
  ChatModel& model_;
  PromptSet prompts_;
  CriticConfig config_;
};

std::string read_prompt(const std::filesystem::path& dir, const char* name) {
  const auto path = dir / name;
  require(std::filesystem::exists(path), ErrorKind::kConfiguration, "missing prompt file " + path.string());
  return read_file(path);
}

}  // namespace

std::unique_ptr<HttpTransport> make_http_transport() { return std::make_unique<HttplibTransport>(); }

std::string chat_request_body(const std::string& model, const ChatRequest& request) {
  require(!request.messages.empty(), ErrorKind::kArgument, "chat request has no messages");
  ordered_json j;
  j["model"] = model;
  ordered_json msgs = ordered_json::array();
  for (const auto& m : request.messages) msgs.push_back(ordered_json{{"role", m.role}, {"content", m.content}});
  j["messages"] = std::move(msgs);
  j["temperature"] = request.temperature;
  j["n"] = request.n;
  if (request.max_tokens) j["max_tokens"] = *request.max_tokens;
  return j.dump();
}

std::vector<std::string> parse_chat_response(const std::string& body, int expected_choices) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    fail(ErrorKind::kProtocol, std::string("chat response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array()) {
    fail(ErrorKind::kProtocol, "chat response lacks a choices array");
  }
  std::vector<std::string> out;
  for (const auto& c : j["choices"]) {
    if (!c.is_object() || !c.contains("message") || !c["message"].is_object() || !c["message"].contains("content") ||
        !c["message"]["content"].is_string()) {
      fail(ErrorKind::kProtocol, "chat response choice lacks message.content");
    }
    out.push_back(c["message"]["content"].get<std::string>());
  }
  require(static_cast<int>(out.size()) == expected_choices, ErrorKind::kProtocol,
          "chat response has " + std::to_string(out.size()) + " choices, expected " + std::to_string(expected_choices));
  return out;
}

std::string chat_request_key(const std::string& model, const ChatRequest& request) {
  return hash_hex(chat_request_body(model, request));
}

void Semaphore::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return permits_ > 0; });
  --permits_;
}

void Semaphore::release() {
  {
    std::lock_guard lock(mu_);
    ++permits_;
  }
  cv_.notify_one();
}

OpenAiChatClient::OpenAiChatClient(EndpointConfig config, std::unique_ptr<HttpTransport> transport, Sleeper sleeper)
    : config_(std::move(config)),
      transport_(transport ? std::move(transport) : make_http_transport()),
      sleeper_(sleeper ? std::move(sleeper)
                       : Sleeper([](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); })),
      in_flight_(std::max(config_.max_in_flight, 1)) {
  require(!config_.api_key_env.empty(), ErrorKind::kConfiguration, "no API key environment variable configured");
  const char* key = std::getenv(config_.api_key_env.c_str());
  require(key != nullptr && *key != '\0', ErrorKind::kConfiguration,
          "environment variable " + config_.api_key_env + " is not set");
  key_ = key;
  require(config_.max_retries >= 0 && config_.timeout_seconds > 0, ErrorKind::kConfiguration,
          "retries must be >= 0 and the timeout positive");
}

std::vector<std::string> OpenAiChatClient::complete(const ChatRequest& request) {
  const std::string body = chat_request_body(config_.model, request);
  const HttpHeaders headers = {{"Authorization", "Bearer " + key_}};
  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay =
          std::min(config_.backoff_initial_seconds * static_cast<double>(1 << std::min(attempt - 1, 20)),
                   config_.backoff_max_seconds);
      spdlog::warn("chat request retry {}/{} in {:.1f}s after: {}", attempt, config_.max_retries, delay, last_error);
      sleeper_(delay);
    }
    ++attempts_;
    HttpResponse res;
    in_flight_.acquire();
    try {
      spdlog::debug("chat request to {}{} ({} bytes, model {})", config_.base_url, config_.path, body.size(),
                    config_.model);
      res = transport_->post(config_.base_url, config_.path, body, headers, config_.timeout_seconds);
      in_flight_.release();
    } catch (const Error& e) {
      in_flight_.release();
      if (!e.retryable()) throw;
      last_error = e.what();
      continue;
    }
    spdlog::debug("chat response status {} ({} bytes)", res.status, res.body.size());
    if (retryable_status(res.status)) {
      last_error = "HTTP " + std::to_string(res.status);
      continue;
    }
    if (res.status < 200 || res.status >= 300) {
      fail(ErrorKind::kProtocol, "chat endpoint rejected the request with HTTP " + std::to_string(res.status));
    }
    return parse_chat_response(res.body, request.n);
  }
  fail(ErrorKind::kTransport,
       "chat request failed after " + std::to_string(config_.max_retries + 1) + " attempts: " + last_error);
}

FixtureChatModel::FixtureChatModel(std::string model, const std::filesystem::path& fixture) : model_(std::move(model)) {
  const std::string text = read_file(fixture);
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      entries_[j.at("key").get<std::string>()] = j.at("choices").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, fixture.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::vector<std::string> FixtureChatModel::complete(const ChatRequest& request) {
  const auto it = entries_.find(chat_request_key(model_, request));
  require(it != entries_.end(), ErrorKind::kData, "no recorded response for this request in the fixture");
  return it->second;
}

RecordingChatModel::RecordingChatModel(ChatModel& inner, std::string model, std::filesystem::path fixture)
    : inner_(inner), model_(std::move(model)), fixture_(std::move(fixture)) {}

std::vector<std::string> RecordingChatModel::complete(const ChatRequest& request) {
  auto out = inner_.complete(request);
  ordered_json j{{"key", chat_request_key(model_, request)},
                 {"request", json::parse(chat_request_body(model_, request))},
                 {"choices", out}};
  std::lock_guard lock(mu_);
  std::ofstream f(fixture_, std::ios::app | std::ios::binary);
  require(f.good(), ErrorKind::kIo, "cannot append to fixture " + fixture_.string());
  f << j.dump() << "\n";
  return out;
}

PromptSet load_prompts(Task task, const std::filesystem::path& dir) {
  const auto base = dir.empty() ? data_dir() / "prompts" / (task == Task::kP4G ? "p4g" : "esconv") : dir;
  PromptSet p;
  p.system = read_prompt(base, "system.txt");
  p.user = read_prompt(base, "user.txt");
  p.critic = read_prompt(base, "critic.txt");
  p.annotator = read_prompt(base, "annotator.txt");
  return p;
}

const std::string& critic_question(Task task) {
  static const std::string p4g = "Has the Persuadee agreed to donate to the charity?";
  static const std::string esconv = "What’s the Patient’s current emotional state?";
  return task == Task::kP4G ? p4g : esconv;
}

std::string parse_critic_option(const std::string& reply, Task task) {
  const std::string text = lower(reply);
  std::string found;
  for (const auto& option : option_vocabulary(task)) {
    // Whole-word match, so "disagree" does not count as "agree".
    for (auto pos = text.find(option); pos != std::string::npos; pos = text.find(option, pos + 1)) {
      const bool left = pos == 0 || !std::isalpha(static_cast<unsigned char>(text[pos - 1]));
      const auto after = pos + option.size();
      const bool right = after >= text.size() || !std::isalpha(static_cast<unsigned char>(text[after]));
      if (!left || !right) continue;
      if (!found.empty() && found != option) {
        fail(ErrorKind::kProtocol, "critic reply names more than one option: " + reply);
      }
      found = option;
      break;
    }
  }
  require(!found.empty(), ErrorKind::kProtocol, "critic reply names no option: " + reply);
  return found;
}

ActorSet make_llm_actors(ChatModel& model, const PromptSet& prompts, const CriticConfig& critic) {
  auto ep = std::make_shared<LlmEpisode>();
  ActorSet set;
  set.system = std::make_unique<LlmSystem>(model, prompts);
  set.user = std::make_unique<LlmUser>(model, prompts, ep);
  set.critic = std::make_unique<LlmCritic>(model, prompts, critic);
  set.backend = "llm";
  return set;
}

}  // namespace udp
