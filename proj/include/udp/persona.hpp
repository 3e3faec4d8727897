#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "udp/chat.hpp"

namespace udp {

enum class Task { kP4G, kESConv };

Task parse_task(std::string_view name);
std::string_view to_string(Task task);

struct PersonaDimension {
  std::string name;
  std::array<std::string, 2> options;
};

enum class Difficulty { kHard, kEasy };
std::string_view to_string(Difficulty d);

struct Persona {
  Task task = Task::kP4G;
  /// Chosen option (0 or 1) per dimension, in dimension order.
  std::vector<int> choice;
  std::optional<Difficulty> difficulty;
  int index = 0;

  /// Option labels in dimension order, difficulty last when present.
  std::vector<std::string> trait_labels() const;
  /// Canonical one-sentence description; the encoder turns these into the
  /// persona bank.
  std::string description() const;

  bool operator==(const Persona&) const = default;
};

const std::vector<PersonaDimension>& persona_dimensions(Task task);
int persona_count(Task task);

/// Canonical order: lexicographic over the dimensions as listed, difficulty
/// (hard before easy) varying fastest.
std::vector<Persona> enumerate_personas(Task task);
Persona persona_at(Task task, int index);

enum class Split { kTrain, kValid, kTest };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct UserProfile {
  Persona persona;
  std::string profile_text;
  std::string profile_id;
  Split split = Split::kTrain;

  bool operator==(const UserProfile&) const = default;
};

/// True when `text` mentions every trait option of `persona` verbatim.
bool mentions_all_traits(const Persona& persona, std::string_view text);

enum class ProfileBackend { kTemplate, kLlm };
ProfileBackend parse_profile_backend(std::string_view name);

struct ProfileGenerationOptions {
  ProfileBackend backend = ProfileBackend::kTemplate;
  /// Required for the llm backend.
  ChatModel* llm = nullptr;
  int max_retries = 3;
  double temperature = 0.9;
};

UserProfile generate_profile(const Persona& persona, std::uint64_t seed, const ProfileGenerationOptions& options,
                             Split split = Split::kTrain, std::string profile_id = {});

/// Profiles per persona in each split.
struct SplitQuota {
  int train = 0;
  int valid = 0;
  int test = 0;
};
/// 25/5/5 for P4G, 5/1/1 for ESConv.
SplitQuota default_quota(Task task);

struct ProfileSet {
  std::vector<UserProfile> profiles;

  std::vector<const UserProfile*> select(Split split) const;
  std::vector<const UserProfile*> select(Split split, int persona_index) const;
  const UserProfile& by_id(std::string_view id) const;
  bool operator==(const ProfileSet&) const = default;
};

ProfileSet build_profile_set(Task task, std::uint64_t seed, const ProfileGenerationOptions& options,
                             const SplitQuota& quota);

/// JSONL, one profile per line.
void save_profiles(const ProfileSet& set, const std::filesystem::path& path);
ProfileSet load_profiles(const std::filesystem::path& path);
ProfileSet parse_profiles(std::string_view jsonl, std::string_view source = "<memory>");

}  // namespace udp
