#pragma once

#include <optional>
#include <string>
#include <vector>

namespace udp {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 0.7;
  /// Number of sampled choices.
  int n = 1;
  std::optional<int> max_tokens;
};

/// Anything that answers chat-completion requests: the HTTP client, a fixture
/// replayer, or a test double. Returns one text per requested choice.
class ChatModel {
 public:
  virtual ~ChatModel() = default;
  virtual std::vector<std::string> complete(const ChatRequest& request) = 0;
};

}  // namespace udp
