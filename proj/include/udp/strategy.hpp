#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "udp/encoder.hpp"
#include "udp/persona.hpp"

namespace udp {

struct Strategy {
  std::string id;
  std::string name;
  std::string description;
};

/// Ordered candidate strategies for one task. Index order is fixed per run
/// and ties are broken toward the lower index.
class StrategySet {
 public:
  StrategySet() = default;
  StrategySet(Task task, std::vector<Strategy> strategies);

  /// JSONL of {id, name, description, task}; records for other tasks are skipped.
  static StrategySet load(const std::filesystem::path& path, Task task);
  static StrategySet parse(std::string_view jsonl, Task task, std::string_view source = "<memory>");
  /// The shipped file under the data directory.
  static StrategySet load_default(Task task);

  Task task() const { return task_; }
  int size() const { return static_cast<int>(items_.size()); }
  const Strategy& at(int index) const;
  int index_of(std::string_view id) const;
  bool contains(std::string_view id) const;
  const std::vector<Strategy>& items() const { return items_; }
  /// Content hash over ids, names and descriptions in order.
  std::string hash() const;

  /// K x d matrix of frozen strategy features ("name: description").
  nn::Matrix features(const TextEncoder& encoder) const;

 private:
  Task task_ = Task::kP4G;
  std::vector<Strategy> items_;
};

/// Data directory compiled into the build; overridable with UDP_DATA_DIR.
std::filesystem::path data_dir();

}  // namespace udp
