#pragma once

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "udp/chat.hpp"
#include "udp/harness.hpp"

namespace udp {

struct EndpointConfig {
  /// scheme://host[:port]
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-3.5-turbo";
  /// Name of the environment variable holding the key; the key itself is never stored in config.
  std::string api_key_env = "OPENAI_API_KEY";
  double timeout_seconds = 60.0;
  int max_retries = 3;
  double backoff_initial_seconds = 1.0;
  double backoff_max_seconds = 30.0;
  int max_in_flight = 4;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

/// One POST. Connection-level failures throw a transport error.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(const std::string& base_url, const std::string& path, const std::string& body,
                            const HttpHeaders& headers, double timeout_seconds) = 0;
};

std::unique_ptr<HttpTransport> make_http_transport();

/// Request body in the chat-completions wire shape.
std::string chat_request_body(const std::string& model, const ChatRequest& request);
/// choices[*].message.content; anything else is a protocol error.
std::vector<std::string> parse_chat_response(const std::string& body, int expected_choices);
/// Stable key over the model name and the request body.
std::string chat_request_key(const std::string& model, const ChatRequest& request);

/// Caps concurrent holders.
class Semaphore {
 public:
  explicit Semaphore(int permits) : permits_(permits) {}
  void acquire();
  void release();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int permits_;
};

class OpenAiChatClient final : public ChatModel {
 public:
  using Sleeper = std::function<void(double seconds)>;

  /// Reads the key from the configured environment variable; a missing or
  /// empty key is a configuration error, raised before any request.
  explicit OpenAiChatClient(EndpointConfig config, std::unique_ptr<HttpTransport> transport = nullptr,
                            Sleeper sleeper = nullptr);

  std::vector<std::string> complete(const ChatRequest& request) override;
  const EndpointConfig& config() const { return config_; }
  int attempts_made() const { return attempts_; }

 private:
  EndpointConfig config_;
  std::string key_;
  std::unique_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
  Semaphore in_flight_;
  std::atomic<int> attempts_{0};
};

/// Replays recorded completions keyed by chat_request_key.
class FixtureChatModel final : public ChatModel {
 public:
  FixtureChatModel(std::string model, const std::filesystem::path& fixture);
  std::vector<std::string> complete(const ChatRequest& request) override;
  std::size_t size() const { return entries_.size(); }

 private:
  std::string model_;
  std::map<std::string, std::vector<std::string>> entries_;
};

/// Forwards to `inner` and appends each exchange to a fixture file.
class RecordingChatModel final : public ChatModel {
 public:
  RecordingChatModel(ChatModel& inner, std::string model, std::filesystem::path fixture);
  std::vector<std::string> complete(const ChatRequest& request) override;

 private:
  ChatModel& inner_;
  std::string model_;
  std::filesystem::path fixture_;
  std::mutex mu_;
};

/// Editable prompt templates for the live actors, one directory per task.
struct PromptSet {
  std::string system;
  std::string user;
  std::string critic;
  std::string annotator;
};

PromptSet load_prompts(Task task, const std::filesystem::path& dir = {});

/// The critic's multiple-choice question for the task.
const std::string& critic_question(Task task);

/// Reads one option label out of a critic reply; a reply naming no option
/// or several is a protocol error.
std::string parse_critic_option(const std::string& reply, Task task);

/// System, user and critic actors backed by a chat model.
ActorSet make_llm_actors(ChatModel& model, const PromptSet& prompts, const CriticConfig& critic);

}  // namespace udp
