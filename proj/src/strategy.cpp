#include "udp/strategy.hpp"

#include <cstdlib>
#include <set>

#include <json.hpp>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {

std::filesystem::path data_dir() {
  if (const char* env = std::getenv("UDP_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return UDP_DATA_DIR;
}

StrategySet::StrategySet(Task task, std::vector<Strategy> strategies) : task_(task), items_(std::move(strategies)) {
  require(items_.size() >= 2, ErrorKind::kConfiguration, "a strategy set needs at least two strategies");
  std::set<std::string> seen;
  for (const auto& s : items_) {
    require(!s.id.empty() && !s.name.empty(), ErrorKind::kConfiguration, "strategy id and name must be non-empty");
    require(seen.insert(s.id).second, ErrorKind::kConfiguration, "duplicate strategy id '" + s.id + "'");
  }
}

StrategySet StrategySet::parse(std::string_view jsonl, Task task, std::string_view source) {
  std::vector<Strategy> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= jsonl.size()) {
    std::size_t end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    const std::string_view line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == jsonl.size()) break;
      continue;
    }
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      if (parse_task(j.at("task").get<std::string>()) != task) continue;
      out.push_back(Strategy{j.at("id").get<std::string>(), j.at("name").get<std::string>(),
                             j.at("description").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kParse, where + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::kParse, where + ": " + e.what());
    }
    if (end == jsonl.size()) break;
  }
  return StrategySet(task, std::move(out));
}

StrategySet StrategySet::load(const std::filesystem::path& path, Task task) {
  return parse(read_file(path), task, path.string());
}

StrategySet StrategySet::load_default(Task task) {
  const char* file = task == Task::kP4G ? "p4g.jsonl" : "esconv.jsonl";
  return load(data_dir() / "strategies" / file, task);
}

const Strategy& StrategySet::at(int index) const {
  if (index < 0 || index >= size()) fail(ErrorKind::kArgument, "strategy index " + std::to_string(index) + " out of range");
  return items_[static_cast<std::size_t>(index)];
}

int StrategySet::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].id == id) return static_cast<int>(i);
  }
  fail(ErrorKind::kVocabulary, "unknown strategy '" + std::string(id) + "'");
}

bool StrategySet::contains(std::string_view id) const {
  for (const auto& s : items_) {
    if (s.id == id) return true;
  }
  return false;
}

std::string StrategySet::hash() const {
  Fnv1a h;
  for (const auto& s : items_) {
    for (const std::string* f : {&s.id, &s.name, &s.description}) {
      h.update(*f);
      h.update("\x1f", 1);
    }
  }
  return h.hex();
}

nn::Matrix StrategySet::features(const TextEncoder& encoder) const {
  nn::Matrix out(size(), encoder.dim());
  for (int k = 0; k < size(); ++k) {
    const Strategy& s = items_[static_cast<std::size_t>(k)];
    out.row(k) = encoder.encode_text(s.name + ": " + s.description, SourceKind::kStrategy).vector.transpose();
  }
  return out;
}

}  // namespace udp
