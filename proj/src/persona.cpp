#include "udp/persona.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include <json.hpp>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {
namespace {

using nlohmann::json;

const std::vector<PersonaDimension> kP4GDimensions = {
    {"income", {"Well-off", "Financially-tight"}},
    {"personality", {"Compassionate", "Rejective"}},
    {"decision_type", {"Rational", "Emotional"}},
};

const std::vector<PersonaDimension> kESConvDimensions = {
    {"extroversion", {"Extravert", "Introvert"}},
    {"openness", {"Adventurous", "Conservative"}},
    {"neuroticism", {"Rational", "Neurotic"}},
};

// Sentence fragments per trait option. Each one carries the option label so
// template profiles are label-bearing.
const std::map<std::string, std::vector<std::string>> kTraitFragments = {
    {"Well-off",
     {"Money is not a worry: you are Well-off and have savings to spare.",
      "You are Well-off, with a comfortable salary and few financial concerns.",
      "Being Well-off, you rarely think twice about spending on things you value."}},
    {"Financially-tight",
     {"Your budget is Financially-tight and every dollar is already planned.",
      "You are Financially-tight this year, juggling rent and bills.",
      "Since things are Financially-tight, you are careful about any extra spending."}},
    {"Compassionate",
     {"You are Compassionate and moved by stories of people in need.",
      "Friends describe you as Compassionate, always ready to help others.",
      "Being Compassionate, you feel for children who lack basic support."}},
    {"Rejective",
     {"You are Rejective toward requests from strangers and distrust appeals.",
      "By nature you are Rejective, quick to say no when someone asks for something.",
      "You tend to be Rejective of charities you have not researched yourself."}},
    {"Rational",
     {"You are Rational and want facts and evidence before acting.",
      "As a Rational thinker, you weigh pros and cons carefully.",
      "You stay Rational, preferring clear reasoning over feelings."}},
    {"Emotional",
     {"You are Emotional in your decisions and follow your heart.",
      "Your choices are Emotional, driven by how a situation makes you feel.",
      "Being Emotional, a touching story can change your mind quickly."}},
    {"Extravert",
     {"You are an Extravert who talks openly and shares a lot.",
      "As an Extravert, you express yourself freely and enjoy conversation.",
      "You are a chatty Extravert who describes feelings in detail."}},
    {"Introvert",
     {"You are an Introvert who keeps thoughts private and answers briefly.",
      "As an Introvert, you find it hard to open up to strangers.",
      "Being an Introvert, you share feelings only when you feel safe."}},
    {"Adventurous",
     {"You are Adventurous and willing to try new ideas and suggestions.",
      "Being Adventurous, you like practical advice you can act on.",
      "You are Adventurous, open to changing routines to feel better."}},
    {"Conservative",
     {"You are Conservative and prefer familiar routines over new advice.",
      "Being Conservative, you are wary of suggestions that change your habits.",
      "You are Conservative and need reassurance before trying anything new."}},
    {"Neurotic",
     {"You are Neurotic, easily worried, and your mood swings quickly.",
      "Being Neurotic, you often feel anxious and overwhelmed.",
      "You are Neurotic and tend to expect the worst."}},
    {"hard",
     {"Your donation acceptance difficulty is hard: you need a lot of convincing.",
      "Persuading you is hard; your donation acceptance difficulty is high."}},
    {"easy",
     {"Your donation acceptance difficulty is easy: a good reason is enough for you.",
      "Persuading you is easy; your donation acceptance difficulty is low."}},
};

const std::vector<std::string> kNames = {"Alex", "Jordan", "Sam", "Taylor", "Morgan", "Casey", "Riley",
                                         "Jamie", "Avery", "Quinn", "Drew", "Robin", "Skyler", "Reese"};
const std::vector<std::string> kJobs = {"a teacher", "a nurse", "a software developer", "a student",
                                        "a shop owner", "an accountant", "a retired engineer",
                                        "a delivery driver", "a graphic designer", "a chef"};

std::string persona_role(Task task) {
  return task == Task::kP4G ? "persuadee" : "help seeker";
}

}  // namespace

Task parse_task(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "p4g") return Task::kP4G;
  if (s == "esconv") return Task::kESConv;
  fail(ErrorKind::kConfiguration, "unknown task '" + std::string(name) + "' (expected P4G or ESConv)");
}

std::string_view to_string(Task task) {
  return task == Task::kP4G ? "P4G" : "ESConv";
}

std::string_view to_string(Difficulty d) {
  return d == Difficulty::kHard ? "hard" : "easy";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  fail(ErrorKind::kArgument, "unknown split '" + std::string(name) + "'");
}

ProfileBackend parse_profile_backend(std::string_view name) {
  if (name == "template") return ProfileBackend::kTemplate;
  if (name == "llm") return ProfileBackend::kLlm;
  fail(ErrorKind::kConfiguration, "unknown profile backend '" + std::string(name) + "'");
}

const std::vector<PersonaDimension>& persona_dimensions(Task task) {
  return task == Task::kP4G ? kP4GDimensions : kESConvDimensions;
}

int persona_count(Task task) {
  const int base = 1 << persona_dimensions(task).size();
  return task == Task::kP4G ? base * 2 : base;
}

std::vector<Persona> enumerate_personas(Task task) {
  const auto& dims = persona_dimensions(task);
  const int m = persona_count(task);
  const bool with_difficulty = task == Task::kP4G;
  std::vector<Persona> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int index = 0; index < m; ++index) {
    Persona p;
    p.task = task;
    p.index = index;
    int rest = index;
    if (with_difficulty) {
      p.difficulty = (rest % 2 == 0) ? Difficulty::kHard : Difficulty::kEasy;
      rest /= 2;
    }
    p.choice.assign(dims.size(), 0);
    for (std::size_t d = dims.size(); d-- > 0;) {
      p.choice[d] = rest % 2;
      rest /= 2;
    }
    out.push_back(std::move(p));
  }
  return out;
}

Persona persona_at(Task task, int index) {
  if (index < 0 || index >= persona_count(task)) {
    fail(ErrorKind::kArgument, "persona index " + std::to_string(index) + " out of range for " +
                                   std::string(to_string(task)));
  }
  return enumerate_personas(task)[static_cast<std::size_t>(index)];
}

std::vector<std::string> Persona::trait_labels() const {
  const auto& dims = persona_dimensions(task);
  std::vector<std::string> out;
  for (std::size_t d = 0; d < dims.size(); ++d) out.push_back(dims[d].options[static_cast<std::size_t>(choice[d])]);
  if (difficulty) out.emplace_back(to_string(*difficulty));
  return out;
}

std::string Persona::description() const {
  const auto labels = trait_labels();
  const auto& dims = persona_dimensions(task);
  std::ostringstream ss;
  ss << "A " << persona_role(task) << " who is";
  for (std::size_t d = 0; d < dims.size(); ++d) {
    ss << (d == 0 ? " " : (d + 1 == dims.size() ? " and " : ", ")) << labels[d] << " in " << dims[d].name;
  }
  if (difficulty) ss << ", with " << to_string(*difficulty) << " donation acceptance difficulty";
  ss << ".";
  return ss.str();
}

bool mentions_all_traits(const Persona& persona, std::string_view text) {
  for (const auto& label : persona.trait_labels()) {
    if (text.find(label) == std::string_view::npos) return false;
  }
  return true;
}

namespace {

std::string template_profile(const Persona& persona, std::uint64_t seed) {
  Rng rng(seed);
  auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& {
    std::uniform_int_distribution<std::size_t> u(0, v.size() - 1);
    return v[u(rng)];
  };
  std::uniform_int_distribution<int> age(19, 72);
  std::ostringstream ss;
  ss << "You are " << pick(kNames) << ", " << age(rng) << " years old, working as " << pick(kJobs) << ". ";
  auto labels = persona.trait_labels();
  // Fragment order varies with the seed; every label stays present.
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i : order) ss << pick(kTraitFragments.at(labels[i])) << " ";
  ss << "Traits: " << [&labels] {
    std::string joined;
    for (std::size_t i = 0; i < labels.size(); ++i) joined += (i ? ", " : "") + labels[i];
    return joined;
  }() << ".";
  return ss.str();
}

std::string llm_profile(const Persona& persona, std::uint64_t seed, const ProfileGenerationOptions& options) {
  require(options.llm != nullptr, ErrorKind::kConfiguration, "llm profile backend needs a configured endpoint");
  const auto labels = persona.trait_labels();
  std::string traits;
  for (std::size_t i = 0; i < labels.size(); ++i) traits += (i ? ", " : "") + labels[i];
  ChatRequest req;
  req.temperature = options.temperature;
  req.messages.push_back({"system", "You write realistic second-person user profiles for role-play."});
  req.messages.push_back(
      {"user", "Write a short user profile (4-6 sentences, second person) for a " + persona_role(persona.task) +
                   " with these traits: " + traits +
                   ". Mention every trait word exactly as written. Variation id: " + std::to_string(seed % 100000) +
                   "."});
  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    const auto out = options.llm->complete(req);
    if (!out.empty() && !out.front().empty() && mentions_all_traits(persona, out.front())) return out.front();
  }
  fail(ErrorKind::kValidation, "generated profile for persona " + std::to_string(persona.index) +
                                   " is missing trait keywords after " + std::to_string(options.max_retries) +
                                   " retries");
}

}  // namespace

UserProfile generate_profile(const Persona& persona, std::uint64_t seed, const ProfileGenerationOptions& options,
                             Split split, std::string profile_id) {
  UserProfile profile;
  profile.persona = persona;
  profile.split = split;
  profile.profile_text = options.backend == ProfileBackend::kTemplate ? template_profile(persona, seed)
                                                                      : llm_profile(persona, seed, options);
  if (profile_id.empty()) {
    profile_id = std::string(to_string(persona.task)) + "-p" + std::to_string(persona.index) + "-" +
                 hash_hex(std::to_string(seed)).substr(0, 8);
  }
  profile.profile_id = std::move(profile_id);
  return profile;
}

SplitQuota default_quota(Task task) {
  return task == Task::kP4G ? SplitQuota{25, 5, 5} : SplitQuota{5, 1, 1};
}

std::vector<const UserProfile*> ProfileSet::select(Split split) const {
  std::vector<const UserProfile*> out;
  for (const auto& p : profiles) {
    if (p.split == split) out.push_back(&p);
  }
  return out;
}

std::vector<const UserProfile*> ProfileSet::select(Split split, int persona_index) const {
  std::vector<const UserProfile*> out;
  for (const auto& p : profiles) {
    if (p.split == split && p.persona.index == persona_index) out.push_back(&p);
  }
  return out;
}

const UserProfile& ProfileSet::by_id(std::string_view id) const {
  for (const auto& p : profiles) {
    if (p.profile_id == id) return p;
  }
  fail(ErrorKind::kArgument, "unknown profile id '" + std::string(id) + "'");
}

ProfileSet build_profile_set(Task task, std::uint64_t seed, const ProfileGenerationOptions& options,
                             const SplitQuota& quota) {
  ProfileSet set;
  const auto personas = enumerate_personas(task);
  const std::pair<Split, int> plan[] = {
      {Split::kTrain, quota.train}, {Split::kValid, quota.valid}, {Split::kTest, quota.test}};
  std::string task_tag(to_string(task));
  std::transform(task_tag.begin(), task_tag.end(), task_tag.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& [split, count] : plan) {
    for (const auto& persona : personas) {
      for (int k = 0; k < count; ++k) {
        char id[64];
        std::snprintf(id, sizeof(id), "%s-%s-p%02d-%03d", task_tag.c_str(), std::string(to_string(split)).c_str(),
                      persona.index, k);
        set.profiles.push_back(generate_profile(persona, derive_seed(seed, std::string_view(id)), options, split, id));
      }
    }
  }
  return set;
}

void save_profiles(const ProfileSet& set, const std::filesystem::path& path) {
  std::string out;
  for (const auto& p : set.profiles) {
    json traits = json::object();
    const auto& dims = persona_dimensions(p.persona.task);
    for (std::size_t d = 0; d < dims.size(); ++d) {
      traits[dims[d].name] = dims[d].options[static_cast<std::size_t>(p.persona.choice[d])];
    }
    json rec = {{"profile_id", p.profile_id},
                {"task", to_string(p.persona.task)},
                {"persona_index", p.persona.index},
                {"traits", traits},
                {"difficulty", p.persona.difficulty ? json(to_string(*p.persona.difficulty)) : json(nullptr)},
                {"split", to_string(p.split)},
                {"profile_text", p.profile_text}};
    out += rec.dump();
    out += '\n';
  }
  write_file(path, out);
}

ProfileSet parse_profiles(std::string_view jsonl, std::string_view source) {
  ProfileSet set;
  std::size_t line_no = 0;
  std::size_t start = 0;
  std::map<std::string, std::size_t> seen;
  while (start <= jsonl.size()) {
    std::size_t end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == jsonl.size()) break;
      continue;
    }
    auto bad = [&](const std::string& why) {
      fail(ErrorKind::kParse, std::string(source) + ":" + std::to_string(line_no) + ": " + why);
    };
    json rec;
    try {
      rec = json::parse(line);
      const Task task = parse_task(rec.at("task").get<std::string>());
      const int index = rec.at("persona_index").get<int>();
      if (index < 0 || index >= persona_count(task)) bad("unknown persona index " + std::to_string(index));
      UserProfile p;
      p.persona = persona_at(task, index);
      p.profile_id = rec.at("profile_id").get<std::string>();
      p.split = parse_split(rec.at("split").get<std::string>());
      p.profile_text = rec.at("profile_text").get<std::string>();
      const auto& dims = persona_dimensions(task);
      const auto& traits = rec.at("traits");
      if (traits.size() != dims.size()) bad("trait map does not match the task's dimensions");
      for (std::size_t d = 0; d < dims.size(); ++d) {
        const auto expected = dims[d].options[static_cast<std::size_t>(p.persona.choice[d])];
        if (traits.at(dims[d].name).get<std::string>() != expected) {
          bad("trait " + dims[d].name + " disagrees with persona index " + std::to_string(index));
        }
      }
      const auto& diff = rec.at("difficulty");
      if (p.persona.difficulty) {
        if (!diff.is_string() || diff.get<std::string>() != to_string(*p.persona.difficulty)) {
          bad("difficulty disagrees with persona index");
        }
      } else if (!diff.is_null()) {
        bad("difficulty is only defined for P4G");
      }
      if (p.profile_text.empty()) bad("empty profile_text");
      if (!mentions_all_traits(p.persona, p.profile_text)) bad("profile_text misses a trait keyword");
      if (seen.count(p.profile_id)) bad("duplicate profile_id " + p.profile_id);
      seen[p.profile_id] = line_no;
      set.profiles.push_back(std::move(p));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kParse) throw;
      bad(e.what());
    } catch (const json::exception& e) {
      bad(e.what());
    }
    if (end == jsonl.size()) break;
  }
  return set;
}

ProfileSet load_profiles(const std::filesystem::path& path) {
  return parse_profiles(read_file(path), path.string());
}

}  // namespace udp
