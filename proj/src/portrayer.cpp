#include "udp/portrayer.hpp"

#include <algorithm>
#include <cmath>

#include "udp/error.hpp"

namespace udp {
namespace {

constexpr double kAlphaBarFloor = 1e-12;

double silu(double v) {
  return v / (1.0 + std::exp(-v));
}

}  // namespace

DiffusionSchedule make_schedule(int N, int T, double beta_start, double beta_end) {
  require(N > 0 && T > 0, ErrorKind::kConfiguration, "diffusion N and T must be positive");
  require(N % T == 0, ErrorKind::kConfiguration,
          "diffusion.N (" + std::to_string(N) + ") must be divisible by diffusion.T (" + std::to_string(T) + ")");
  require(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0, ErrorKind::kConfiguration,
          "need 0 < beta_start < beta_end < 1");
  DiffusionSchedule s;
  s.N = N;
  s.T = T;
  s.betas.assign(static_cast<std::size_t>(N) + 1, 0.0);
  s.alphas_bar.assign(static_cast<std::size_t>(N) + 1, 1.0);
  for (int i = 1; i <= N; ++i) {
    const double frac = N == 1 ? 0.0 : static_cast<double>(i - 1) / static_cast<double>(N - 1);
    s.betas[i] = beta_start + frac * (beta_end - beta_start);
    s.alphas_bar[i] = s.alphas_bar[i - 1] * (1.0 - s.betas[i]);
  }
  return s;
}

int turn_noise_index(int t, const DiffusionSchedule& schedule) {
  if (t < 0 || t > schedule.T) {
    fail(ErrorKind::kArgument, "turn " + std::to_string(t) + " outside [0, " + std::to_string(schedule.T) + "]");
  }
  return schedule.N - t * schedule.steps_per_turn();
}

NoisedSample forward_noise(const nn::Vector& x0, int i, const DiffusionSchedule& schedule, Rng& rng) {
  require(i >= 0 && i <= schedule.N, ErrorKind::kArgument, "noise index out of range");
  std::normal_distribution<double> normal(0.0, 1.0);
  NoisedSample out;
  out.eps.resize(x0.size());
  for (Eigen::Index k = 0; k < x0.size(); ++k) out.eps(k) = normal(rng);
  const double ab = schedule.alphas_bar[i];
  out.x = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * out.eps;
  return out;
}

nn::Vector estimate_x0(const nn::Vector& x, const nn::Vector& eps_hat, int i, const DiffusionSchedule& schedule) {
  require(i >= 0 && i <= schedule.N, ErrorKind::kArgument, "noise index out of range");
  require(x.size() == eps_hat.size(), ErrorKind::kShape, "estimate_x0: x and eps_hat differ in length");
  const double ab = schedule.alphas_bar[i];
  if (ab < kAlphaBarFloor) {
    fail(ErrorKind::kNumericalDomain, "alpha_bar at step " + std::to_string(i) + " is below the numerical floor");
  }
  const double root = std::sqrt(ab);
  return x / root - (std::sqrt(1.0 - ab) / root) * eps_hat;
}

int PersonaDistribution::argmax() const {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

PersonaDistribution persona_distribution(const nn::Vector& x0_hat, const nn::Matrix& bank, double temperature) {
  require(bank.cols() == x0_hat.size(), ErrorKind::kShape, "persona bank width differs from the state width");
  require(temperature > 0, ErrorKind::kArgument, "similarity temperature must be positive");
  const double n = x0_hat.norm();
  if (n == 0.0) fail(ErrorKind::kArgument, "x0 estimate has zero norm");
  nn::Vector logits(bank.rows());
  for (Eigen::Index j = 0; j < bank.rows(); ++j) logits(j) = bank.row(j).dot(x0_hat) / (bank.row(j).norm() * n);
  logits /= temperature;
  const double m = logits.maxCoeff();
  nn::Vector e = (logits.array() - m).exp();
  e /= e.sum();
  return PersonaDistribution{std::vector<double>(e.data(), e.data() + e.size()), 0};
}

PortrayerModel::PortrayerModel(nn::Matrix persona_bank, int condition_dim, PortrayerConfig config,
                               std::uint64_t seed, int N)
    : bank_(std::move(persona_bank)), condition_dim_(condition_dim), config_(config) {
  require(bank_.rows() >= 2, ErrorKind::kConfiguration, "persona bank needs at least two rows");
  require(condition_dim > 0, ErrorKind::kConfiguration, "condition dimension must be positive");
  const int d = state_dim();
  if (config_.hidden <= 0) config_.hidden = 2 * d;
  bank_unit_ = bank_.rowwise().normalized();
  bank_norm_ = bank_.rowwise().norm().mean();
  step_table_.resize(N + 1, config_.step_features);
  for (int i = 0; i <= N; ++i) step_table_.row(i) = nn::sinusoidal_embedding(i, config_.step_features);
  Rng rng(seed);
  net_ = nn::Mlp("portrayer.net", {d + config_.step_features + condition_dim, config_.hidden, config_.hidden, d}, rng);
  refresh_cache();
}

nn::ParameterList PortrayerModel::parameters() {
  nn::ParameterList out;
  net_.collect(out);
  return out;
}

void PortrayerModel::refresh_cache() {
  const auto& w = net_.layers().front().weight().value;
  step_projection_ = step_table_ * w.middleRows(state_dim(), config_.step_features);
}

nn::Var PortrayerModel::predict_x0(nn::Tape& tape, nn::Var x, std::span<const int> steps, nn::Var condition) {
  require(x.rows() == static_cast<Eigen::Index>(steps.size()), ErrorKind::kShape, "one step index per row");
  require(condition.cols() == condition_dim_, ErrorKind::kShape, "condition dimension mismatch");
  nn::Matrix feats(static_cast<Eigen::Index>(steps.size()), config_.step_features);
  for (std::size_t r = 0; r < steps.size(); ++r) feats.row(static_cast<Eigen::Index>(r)) = step_table_.row(steps[r]);
  const nn::Var parts[] = {x, tape.constant(std::move(feats)), condition};
  nn::Var raw = net_.forward(tape, nn::concat_cols(parts));
  return nn::scale(nn::l2_normalize_rows(raw), bank_norm_);
}

nn::Var PortrayerModel::logits(nn::Tape& tape, nn::Var x0) {
  nn::Var unit = nn::l2_normalize_rows(x0);
  return nn::scale(nn::matmul(unit, tape.constant(bank_unit_.transpose())), 1.0 / config_.temperature);
}

nn::Matrix PortrayerModel::project_condition(const nn::Matrix& condition) const {
  require(condition.cols() == condition_dim_, ErrorKind::kShape, "condition dimension mismatch");
  const auto& first = net_.layers().front();
  const nn::Matrix& w = first.weight().value;
  const nn::Matrix& b = first.bias().value;
  nn::Matrix out = condition * w.bottomRows(condition_dim_);
  out.rowwise() += b.row(0);
  return out;
}

nn::Matrix PortrayerModel::predict_x0(const nn::Matrix& x, int step, const nn::Matrix& condition_proj) const {
  const auto& layers = net_.layers();
  nn::Matrix h = x * layers[0].weight().value.topRows(state_dim()) + condition_proj;
  h.rowwise() += step_projection_.row(step);
  h = h.unaryExpr(&silu);
  for (std::size_t l = 1; l < layers.size(); ++l) {
    nn::Matrix next = h * layers[l].weight().value;
    next.rowwise() += layers[l].bias().value.row(0);
    h = l + 1 < layers.size() ? next.unaryExpr(&silu) : next;
  }
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    const double n = std::sqrt(h.row(r).squaredNorm() + 1e-12);
    h.row(r) *= bank_norm_ / n;
  }
  return h;
}

PortrayerState init_portrayer_state(const DiffusionSchedule& schedule, int dim, std::uint64_t seed) {
  PortrayerState s;
  s.rng.seed(seed);
  s.i = schedule.N;
  s.turn = 0;
  std::normal_distribution<double> normal(0.0, 1.0);
  s.x.resize(dim);
  for (int k = 0; k < dim; ++k) s.x(k) = normal(s.rng);
  return s;
}

std::vector<PersonaDistribution> denoise_turn_batch(std::span<PortrayerState*> states, const nn::Matrix& conditions,
                                                    const DiffusionSchedule& schedule, const PortrayerModel& model) {
  const auto B = static_cast<Eigen::Index>(states.size());
  require(B > 0, ErrorKind::kArgument, "denoise_turn_batch needs at least one state");
  require(conditions.rows() == B, ErrorKind::kShape, "one condition row per state");
  require(conditions.cols() == model.condition_dim(), ErrorKind::kShape, "condition dimension mismatch");
  const int d = model.state_dim();
  const int turn = states[0]->turn;
  for (auto* s : states) {
    require(s->turn == turn, ErrorKind::kArgument, "batched states must share a turn");
    require(s->turn < schedule.T, ErrorKind::kPrecondition, "dialogue already reached the final turn");
    require(s->i == turn_noise_index(s->turn, schedule), ErrorKind::kInvariant, "portrayer step bookkeeping drifted");
    require(s->x.size() == d, ErrorKind::kShape, "state dimension mismatch");
  }
  nn::Matrix x(B, d);
  for (Eigen::Index r = 0; r < B; ++r) x.row(r) = states[r]->x.transpose();
  const nn::Matrix proj = model.project_condition(conditions);
  const int start = states[0]->i;
  const int stop = turn_noise_index(turn + 1, schedule);
  // One distribution per row: libstdc++ caches the second normal of each pair.
  std::vector<std::normal_distribution<double>> normals(states.size());
  for (int i = start; i > stop; --i) {
    const double ab = schedule.alphas_bar[i];
    const double beta = schedule.betas[i];
    const nn::Matrix x0 = model.predict_x0(x, i, proj);
    const nn::Matrix eps = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    x = (x - (beta / std::sqrt(1.0 - ab)) * eps) / std::sqrt(1.0 - beta);
    if (i - 1 > 0) {
      const double sd = std::sqrt(beta);
      for (Eigen::Index r = 0; r < B; ++r) {
        for (int k = 0; k < d; ++k) x(r, k) += sd * normals[r](states[r]->rng);
      }
    }
  }
  std::vector<PersonaDistribution> out;
  out.reserve(states.size());
  const nn::Matrix x0 = stop > 0 ? model.predict_x0(x, stop, proj) : x;
  for (Eigen::Index r = 0; r < B; ++r) {
    PortrayerState& s = *states[r];
    s.x = x.row(r).transpose();
    s.i = stop;
    s.turn = turn + 1;
    // With the x0-parameterized net, estimate_x0 on the derived noise returns x0 itself.
    PersonaDistribution dist = persona_distribution(x0.row(r).transpose(), model.bank(), model.config().temperature);
    dist.turn = s.turn;
    out.push_back(std::move(dist));
  }
  return out;
}

PersonaDistribution denoise_turn(PortrayerState& state, const nn::Vector& condition,
                                 const DiffusionSchedule& schedule, const PortrayerModel& model) {
  PortrayerState* one[] = {&state};
  return denoise_turn_batch(one, condition.transpose(), schedule, model).front();
}

nn::Var portrayer_loss(nn::Tape& tape, PortrayerModel& model, std::span<const PortrayerExample> batch,
                       const DiffusionSchedule& schedule, Rng& rng) {
  require(!batch.empty(), ErrorKind::kArgument, "empty portrayer batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  nn::Matrix x(B, model.state_dim());
  nn::Matrix c(B, model.condition_dim());
  std::vector<int> steps;
  std::vector<int> labels;
  for (Eigen::Index r = 0; r < B; ++r) {
    const PortrayerExample& ex = batch[r];
    if (ex.label < 0 || ex.label >= model.persona_count()) {
      fail(ErrorKind::kArgument, "persona label " + std::to_string(ex.label) + " out of range");
    }
    require(ex.condition.size() == model.condition_dim(), ErrorKind::kShape, "condition dimension mismatch");
    int i = turn_noise_index(ex.turn, schedule);
    if (model.config().sample_block) {
      std::uniform_int_distribution<int> pick(i, turn_noise_index(ex.turn - 1, schedule));
      i = pick(rng);
    }
    const nn::Vector x0 = model.bank().row(ex.label).transpose();
    x.row(r) = forward_noise(x0, i, schedule, rng).x.transpose();
    c.row(r) = ex.condition.transpose();
    steps.push_back(i);
    labels.push_back(ex.label);
  }
  nn::Var x0 = model.predict_x0(tape, tape.constant(std::move(x)), steps, tape.constant(std::move(c)));
  return nn::cross_entropy(model.logits(tape, x0), labels);
}

}  // namespace udp
