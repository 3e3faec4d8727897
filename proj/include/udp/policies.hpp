#pragma once

#include <vector>

#include "udp/harness.hpp"
#include "udp/util.hpp"

namespace udp {

/// Persona-agnostic behavior policy used to build pretraining corpora: with
/// probability `follow` the next strategy is (previous + 1) mod K, otherwise
/// uniform. The first turn is uniform.
class MarkovExpertPolicy final : public Policy {
 public:
  MarkovExpertPolicy(int strategies, double follow = 0.5);
  void begin(const DialogueContext& ctx, std::uint64_t seed) override;
  Decision choose(const DialogueContext& ctx) override;
  std::string name() const override { return "markov-expert"; }

 private:
  int K_;
  double follow_;
  Rng rng_;
};

class UniformPolicy final : public Policy {
 public:
  explicit UniformPolicy(int strategies) : K_(strategies) {}
  void begin(const DialogueContext&, std::uint64_t seed) override { rng_.seed(seed); }
  Decision choose(const DialogueContext& ctx) override;
  std::string name() const override { return "uniform"; }

 private:
  int K_;
  Rng rng_;
};

/// Plays a fixed strategy sequence, repeating the last entry.
class ScriptPolicy final : public Policy {
 public:
  explicit ScriptPolicy(std::vector<int> sequence);
  void begin(const DialogueContext&, std::uint64_t) override {}
  Decision choose(const DialogueContext& ctx) override;
  std::string name() const override { return "script"; }

 private:
  std::vector<int> sequence_;
};

}  // namespace udp
