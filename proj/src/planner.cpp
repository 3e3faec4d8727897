#include "udp/planner.hpp"

#include <algorithm>
#include <cmath>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {

int PolicyDistribution::argmax() const {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

PlannerModel::PlannerModel(int width, int dz, PlannerConfig config, std::uint64_t seed)
    : width_(width), dz_(dz), config_(config) {
  require(width > 0 && dz > 0, ErrorKind::kConfiguration, "planner sizes must be positive");
  require(config.layers >= 1, ErrorKind::kConfiguration, "planner needs at least one fusion layer");
  require(width % config.heads == 0, ErrorKind::kConfiguration, "planner width must be divisible by heads");
  if (config_.ffn <= 0) config_.ffn = 2 * width;
  if (config_.action_hidden <= 0) config_.action_hidden = width;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  nn::Matrix pos(2, width);
  for (Eigen::Index i = 0; i < pos.size(); ++i) pos.data()[i] = normal(rng);
  positions_ = nn::Parameter("planner.positions", std::move(pos));
  for (int l = 0; l < config_.layers; ++l) {
    layers_.emplace_back("planner.fusion." + std::to_string(l), width, config_.heads, config_.ffn, rng);
  }
  final_norm_ = nn::LayerNorm("planner.fusion.norm", width);
  action_mlp_ = nn::Mlp("planner.action", {width + dz, config_.action_hidden, width}, rng);
}

nn::ParameterList PlannerModel::parameters() {
  nn::ParameterList out{&positions_};
  for (auto& l : layers_) l.collect(out);
  final_norm_.collect(out);
  action_mlp_.collect(out);
  return out;
}

nn::Var PlannerModel::fuse(nn::Tape& tape, nn::Var history, nn::Var persona) {
  require(history.cols() == width_ && persona.cols() == width_, ErrorKind::kShape,
          "fusion inputs must match the planner width");
  require(history.rows() == persona.rows(), ErrorKind::kShape, "fusion inputs differ in batch size");
  const auto B = static_cast<int>(history.rows());
  // Interleave into [h_0; p_0; h_1; p_1; ...].
  const nn::Var both[] = {history, persona};
  std::vector<int> order(static_cast<std::size_t>(2 * B));
  for (int b = 0; b < B; ++b) {
    order[2 * b] = b;
    order[2 * b + 1] = B + b;
  }
  nn::Var x = nn::gather_rows(nn::concat_rows(both), order);
  std::vector<int> slots(static_cast<std::size_t>(2 * B));
  for (int r = 0; r < 2 * B; ++r) slots[r] = r % 2;
  x = nn::add(x, nn::gather_rows(tape.parameter(positions_), slots));
  for (auto& layer : layers_) x = layer.forward(tape, x, 2);
  x = final_norm_.forward(tape, x);
  std::vector<int> state_rows(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) state_rows[b] = 2 * b;
  return nn::gather_rows(x, state_rows);
}

nn::Var PlannerModel::action_matrix(nn::Tape& tape, nn::Var strategies, nn::Var feedback) {
  if (strategies.rows() != feedback.rows()) {
    fail(ErrorKind::kArgument, "action_matrix: " + std::to_string(strategies.rows()) + " strategies but " +
                                   std::to_string(feedback.rows()) + " feedback predictions");
  }
  require(strategies.cols() == width_ && feedback.cols() == dz_, ErrorKind::kShape, "action_matrix input widths");
  const nn::Var parts[] = {strategies, feedback};
  return action_mlp_.forward(tape, nn::concat_cols(parts));
}

nn::Var PlannerModel::logits(nn::Var sp, nn::Var actions, int K) {
  return nn::grouped_dot(sp, actions, K);
}

nn::Var PlannerModel::log_policy(nn::Tape& tape, std::span<const PlanningRecord> records, const nn::Matrix& strategies) {
  require(!records.empty(), ErrorKind::kArgument, "no planning records");
  const auto B = static_cast<Eigen::Index>(records.size());
  const auto K = strategies.rows();
  nn::Matrix h(B, width_), p(B, width_), a(B * K, width_), z(B * K, dz_);
  for (Eigen::Index b = 0; b < B; ++b) {
    const PlanningRecord& r = records[b];
    require(r.feedback.rows() == K && r.feedback.cols() == dz_, ErrorKind::kShape, "feedback matrix shape");
    h.row(b) = r.history.transpose();
    p.row(b) = r.persona.transpose();
    a.middleRows(b * K, K) = strategies;
    z.middleRows(b * K, K) = r.feedback;
  }
  nn::Var sp = fuse(tape, tape.constant(std::move(h)), tape.constant(std::move(p)));
  nn::Var A = action_matrix(tape, tape.constant(std::move(a)), tape.constant(std::move(z)));
  return nn::log_softmax_rows(logits(sp, A, static_cast<int>(K)));
}

PolicyDistribution PlannerModel::policy(const nn::Vector& history, const nn::Vector& persona,
                                        const nn::Matrix& strategies, const nn::Matrix& feedback) {
  nn::Tape tape(false);
  nn::Var sp = fuse(tape, tape.constant(history.transpose()), tape.constant(persona.transpose()));
  nn::Var A = action_matrix(tape, tape.constant(strategies), tape.constant(feedback));
  return udp::policy(sp.value().row(0).transpose(), A.value());
}

PolicyDistribution policy(const nn::Vector& sp, const nn::Matrix& A) {
  require(A.cols() == sp.size(), ErrorKind::kShape, "policy: A width differs from sp");
  const nn::Vector logits = A * sp;
  const double m = logits.maxCoeff();
  nn::Vector e = (logits.array() - m).exp();
  e /= e.sum();
  PolicyDistribution out;
  out.probs.assign(e.data(), e.data() + e.size());
  out.logits.assign(logits.data(), logits.data() + logits.size());
  return out;
}

nn::Var supervised_loss(nn::Tape& tape, PlannerModel& model, std::span<const PlanningRecord> records,
                        const nn::Matrix& strategies) {
  std::vector<int> labels;
  for (const auto& r : records) {
    if (r.action < 0 || r.action >= strategies.rows()) {
      fail(ErrorKind::kArgument, "strategy label " + std::to_string(r.action) + " out of range");
    }
    labels.push_back(r.action);
  }
  return nn::scale(nn::mean(nn::pick(model.log_policy(tape, records, strategies), labels)), -1.0);
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma, bool reward_to_go) {
  require(!rewards.empty(), ErrorKind::kArgument, "returns of an empty episode");
  require(gamma > 0.0 && gamma <= 1.0, ErrorKind::kArgument, "gamma must lie in (0, 1]");
  const std::size_t T = rewards.size();
  std::vector<double> out(T);
  double acc = 0.0;
  for (std::size_t k = T; k-- > 0;) {
    if (reward_to_go) {
      acc = rewards[k] + gamma * acc;
    } else {
      // Turn k+1 of T carries weight gamma^(T - (k+1)) in every R_t with t <= k+1.
      acc += std::pow(gamma, static_cast<double>(T - 1 - k)) * rewards[k];
    }
    out[k] = acc;
  }
  return out;
}

nn::Var policy_gradient_loss(nn::Var logprobs, std::span<const double> returns) {
  if (logprobs.rows() != static_cast<Eigen::Index>(returns.size()) || logprobs.cols() != 1) {
    fail(ErrorKind::kArgument, "policy_gradient_loss: " + std::to_string(logprobs.rows()) + " log-probs but " +
                                   std::to_string(returns.size()) + " returns");
  }
  nn::Matrix R(static_cast<Eigen::Index>(returns.size()), 1);
  for (std::size_t i = 0; i < returns.size(); ++i) R(static_cast<Eigen::Index>(i), 0) = returns[i];
  return nn::scale(nn::sum(nn::mul(logprobs, logprobs.tape()->constant(std::move(R)))), -1.0);
}

}  // namespace udp
