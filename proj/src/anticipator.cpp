#include "udp/anticipator.hpp"

#include <cmath>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {
namespace {

constexpr double kPsiFloor = 1e-6;

double softplus(double v) {
  return v > 30 ? v : std::log1p(std::exp(v));
}

void check_turn(int t, int T) {
  if (t < 1 || t > T) fail(ErrorKind::kArgument, "turn " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

}  // namespace

FeedbackPrediction bridge_moments(const nn::Vector& z_prev, const nn::Vector& z_a, const nn::Vector& z_T, double psi,
                                  int t, int T) {
  check_turn(t, T);
  require(z_prev.size() == z_a.size() && z_a.size() == z_T.size(), ErrorKind::kShape, "bridge states differ in length");
  const double rest = static_cast<double>(T - t);
  const double denom = rest + 1.0;
  FeedbackPrediction out;
  out.mu = rest * (z_prev + z_a) / denom + z_T / denom;
  out.sigma2 = 4.0 * rest * psi / (denom * denom);
  out.turn = t;
  return out;
}

AnticipatorModel::AnticipatorModel(int embed_dim, AnticipatorConfig config, std::uint64_t seed)
    : embed_dim_(embed_dim), config_(config) {
  require(embed_dim > 0 && config.dz > 0 && config.hidden > 0, ErrorKind::kConfiguration,
          "anticipator sizes must be positive");
  Rng rng(seed);
  fu_ = nn::Mlp("anticipator.f_u", {embed_dim, config.hidden, config.dz}, rng);
  fp_ = nn::Mlp("anticipator.f_p", {embed_dim, config.hidden, config.dz}, rng);
  fa_ = nn::Mlp("anticipator.f_a", {embed_dim, config.hidden, config.dz}, rng);
  psi_ = nn::Mlp("anticipator.psi", {config.dz, config.hidden, 1}, rng);
}

nn::ParameterList AnticipatorModel::parameters() {
  nn::ParameterList out;
  fu_.collect(out);
  fp_.collect(out);
  fa_.collect(out);
  psi_.collect(out);
  return out;
}

nn::Var AnticipatorModel::f_u(nn::Tape& tape, nn::Var u) {
  require(u.cols() == embed_dim_, ErrorKind::kShape, "utterance embedding dimension mismatch");
  return fu_.forward(tape, u);
}
nn::Var AnticipatorModel::f_p(nn::Tape& tape, nn::Var p) {
  require(p.cols() == embed_dim_, ErrorKind::kShape, "persona embedding dimension mismatch");
  return fp_.forward(tape, p);
}
nn::Var AnticipatorModel::f_a(nn::Tape& tape, nn::Var a) {
  require(a.cols() == embed_dim_, ErrorKind::kShape, "strategy feature dimension mismatch");
  return fa_.forward(tape, a);
}
nn::Var AnticipatorModel::psi(nn::Tape& tape, nn::Var z_a) {
  return nn::add_scalar(nn::softplus(psi_.forward(tape, z_a)), kPsiFloor);
}

nn::Matrix AnticipatorModel::eval(const nn::Mlp& net, const nn::Matrix& x) const {
  nn::Matrix h = x;
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    nn::Matrix next = h * layers[l].weight().value;
    next.rowwise() += layers[l].bias().value.row(0);
    h = l + 1 < layers.size() ? next.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); }) : next;
  }
  return h;
}

nn::Vector AnticipatorModel::golden_state(const nn::Vector& utterance) const {
  require(utterance.size() == embed_dim_, ErrorKind::kShape, "utterance embedding dimension mismatch");
  return eval(fu_, utterance.transpose()).row(0).transpose();
}

std::vector<FeedbackPrediction> AnticipatorModel::predict_all(const nn::Vector& z_prev, const nn::Matrix& strategies,
                                                              const nn::Vector& persona, int t, int T) const {
  check_turn(t, T);
  require(z_prev.size() == config_.dz, ErrorKind::kShape, "previous bridge state has the wrong dimension");
  require(strategies.cols() == embed_dim_ && persona.size() == embed_dim_, ErrorKind::kShape,
          "anticipator input dimension mismatch");
  const nn::Matrix za = eval(fa_, strategies);
  const nn::Matrix psi_raw = eval(psi_, za);
  const nn::Vector zT = eval(fp_, persona.transpose()).row(0).transpose();
  std::vector<FeedbackPrediction> out;
  out.reserve(static_cast<std::size_t>(strategies.rows()));
  for (Eigen::Index k = 0; k < strategies.rows(); ++k) {
    FeedbackPrediction p =
        bridge_moments(z_prev, za.row(k).transpose(), zT, softplus(psi_raw(k, 0)) + kPsiFloor, t, T);
    p.strategy = static_cast<int>(k);
    out.push_back(std::move(p));
  }
  return out;
}

FeedbackPrediction AnticipatorModel::predict_feedback(const nn::Vector& z_prev, const nn::Vector& strategy,
                                                      const nn::Vector& persona, int t, int T) const {
  return predict_all(z_prev, strategy.transpose(), persona, t, T).front();
}

nn::Var contrastive_from_moments(nn::Var mu, nn::Var sigma2, nn::Var golden) {
  require(mu.rows() == golden.rows() && sigma2.rows() == mu.rows() && sigma2.cols() == 1, ErrorKind::kShape,
          "contrastive loss: batch shapes disagree");
  if ((sigma2.value().array() <= 0.0).any()) fail(ErrorKind::kInvariant, "bridge variance must be positive");
  const auto B = static_cast<int>(mu.rows());
  nn::Var dist = nn::pairwise_sq_dist(mu, golden);
  nn::Var logits = nn::scale(nn::mul_col(dist, nn::reciprocal(sigma2)), -0.5);
  std::vector<int> labels(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) labels[static_cast<std::size_t>(b)] = b;
  return nn::cross_entropy(logits, labels);
}

ContrastiveOutput contrastive_loss(nn::Tape& tape, AnticipatorModel& model, std::span<const AnticipatorExample> batch,
                                   int T) {
  require(!batch.empty(), ErrorKind::kArgument, "empty anticipator batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  const int e = model.embed_dim();
  nn::Matrix prev = nn::Matrix::Zero(B, e);
  nn::Matrix has_prev = nn::Matrix::Zero(B, 1);
  nn::Matrix strat(B, e), persona(B, e), reply(B, e);
  nn::Matrix w_prev(B, 1), w_end(B, 1), w_var(B, 1);
  for (Eigen::Index b = 0; b < B; ++b) {
    const AnticipatorExample& ex = batch[b];
    check_turn(ex.turn, T);
    if (ex.turn == T) fail(ErrorKind::kInvariant, "bridge variance is zero at the final turn");
    if (ex.prev_utterance.size() > 0) {
      prev.row(b) = ex.prev_utterance.transpose();
      has_prev(b, 0) = 1.0;
    }
    strat.row(b) = ex.strategy.transpose();
    persona.row(b) = ex.persona.transpose();
    reply.row(b) = ex.reply.transpose();
    const double rest = static_cast<double>(T - ex.turn);
    w_prev(b, 0) = rest / (rest + 1.0);
    w_end(b, 0) = 1.0 / (rest + 1.0);
    w_var(b, 0) = 4.0 * rest / ((rest + 1.0) * (rest + 1.0));
  }
  // z_0 is the zero vector, so rows without a previous reply are masked out.
  nn::Var z_prev = nn::mul_col(model.f_u(tape, tape.constant(std::move(prev))), tape.constant(std::move(has_prev)));
  nn::Var z_a = model.f_a(tape, tape.constant(std::move(strat)));
  nn::Var z_T = model.f_p(tape, tape.constant(std::move(persona)));
  nn::Var mu = nn::add(nn::mul_col(nn::add(z_prev, z_a), tape.constant(std::move(w_prev))),
                       nn::mul_col(z_T, tape.constant(std::move(w_end))));
  nn::Var sigma2 = nn::mul(model.psi(tape, z_a), tape.constant(std::move(w_var)));
  nn::Var golden = model.f_u(tape, tape.constant(std::move(reply)));

  ContrastiveOutput out;
  out.loss = contrastive_from_moments(mu, sigma2, golden);
  const nn::Matrix& M = mu.value();
  const nn::Matrix& G = golden.value();
  for (Eigen::Index b = 0; b < B; ++b) {
    Eigen::Index best = 0;
    double best_d = (M.row(b) - G.row(0)).squaredNorm();
    for (Eigen::Index c = 1; c < B; ++c) {
      const double d = (M.row(b) - G.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (best == b) ++out.top1;
  }
  return out;
}

}  // namespace udp
