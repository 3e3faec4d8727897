#include "udp/policies.hpp"

#include "udp/error.hpp"

namespace udp {

MarkovExpertPolicy::MarkovExpertPolicy(int strategies, double follow) : K_(strategies), follow_(follow) {
  require(strategies >= 2, ErrorKind::kConfiguration, "need at least two strategies");
  require(follow >= 0.0 && follow <= 1.0, ErrorKind::kConfiguration, "follow probability must lie in [0, 1]");
}

void MarkovExpertPolicy::begin(const DialogueContext&, std::uint64_t seed) {
  rng_.seed(seed);
}

Decision MarkovExpertPolicy::choose(const DialogueContext& ctx) {
  std::uniform_int_distribution<int> any(0, K_ - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const double u = coin(rng_);
  const int fresh = any(rng_);
  if (ctx.turns.empty() || u >= follow_) return Decision{fresh, std::nullopt};
  return Decision{(ctx.turns.back().strategy_index + 1) % K_, std::nullopt};
}

Decision UniformPolicy::choose(const DialogueContext&) {
  std::uniform_int_distribution<int> any(0, K_ - 1);
  return Decision{any(rng_), std::nullopt};
}

ScriptPolicy::ScriptPolicy(std::vector<int> sequence) : sequence_(std::move(sequence)) {
  require(!sequence_.empty(), ErrorKind::kConfiguration, "script policy needs at least one strategy");
}

Decision ScriptPolicy::choose(const DialogueContext& ctx) {
  const std::size_t k = std::min(ctx.turns.size(), sequence_.size() - 1);
  return Decision{sequence_[k], std::nullopt};
}

}  // namespace udp
