#include <doctest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "udp/anticipator.hpp"
#include "udp/error.hpp"
#include "udp/util.hpp"

using namespace udp;

namespace {

nn::Vector random_vector(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> d;
  nn::Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

}  // namespace

TEST_CASE("bridge moments match the closed form") {
  const nn::Vector zp = random_vector(5, 1), za = random_vector(5, 2), zT = random_vector(5, 3);
  const double psi = 0.37;
  for (int t = 1; t <= 10; ++t) {
    const auto m = bridge_moments(zp, za, zT, psi, t, 10);
    const double r = 10 - t;
    const nn::Vector mu = r / (r + 1) * (zp + za) + zT / (r + 1);
    CHECK((m.mu - mu).norm() < 1e-12);
    CHECK(m.sigma2 == doctest::Approx(4 * r * psi / ((r + 1) * (r + 1))));
  }
  // Worked value: t = 1 of 10.
  const auto m = bridge_moments(nn::Vector::Zero(1), nn::Vector::Ones(1), nn::Vector::Constant(1, 2.0), 1.0, 1, 10);
  CHECK(m.mu[0] == doctest::Approx(0.9 * 1.0 + 0.2));
  CHECK(m.sigma2 == doctest::Approx(0.36));
}

TEST_CASE("bridge collapses onto the goal at the last turn") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const nn::Vector zp = random_vector(4, seed), za = random_vector(4, seed + 50), zT = random_vector(4, seed + 99);
    const auto m = bridge_moments(zp, za, zT, 2.5, 10, 10);
    CHECK((m.mu - zT).norm() < 1e-12);
    CHECK(m.sigma2 == 0.0);
  }
}

TEST_CASE("bridge variance stays within [0, psi] and peaks one turn before the end") {
  const nn::Vector z = random_vector(3, 4);
  for (double psi : {1e-6, 0.3, 2.0}) {
    for (int t = 1; t <= 10; ++t) {
      const double s2 = bridge_moments(z, z, z, psi, t, 10).sigma2;
      CHECK(s2 >= 0.0);
      CHECK(s2 <= psi * (1 + 1e-12));
    }
    CHECK(bridge_moments(z, z, z, psi, 9, 10).sigma2 == doctest::Approx(psi));
  }
}

TEST_CASE("bridge rejects out-of-range turns and mismatched states") {
  const nn::Vector z = random_vector(3, 4);
  CHECK_THROWS_AS(bridge_moments(z, z, z, 1.0, 0, 10), Error);
  CHECK_THROWS_AS(bridge_moments(z, z, z, 1.0, 11, 10), Error);
  CHECK_THROWS_AS(bridge_moments(z, random_vector(2, 1), z, 1.0, 1, 10), Error);
}

TEST_CASE("psi head is strictly positive") {
  AnticipatorModel model(6, AnticipatorConfig{.dz = 4, .hidden = 8}, 2);
  nn::Tape tape(false);
  nn::Matrix za(3, 4);
  za << -50, -50, -50, -50, 0, 0, 0, 0, 5, 5, 5, 5;
  const auto psi = model.psi(tape, tape.constant(za));
  for (int i = 0; i < 3; ++i) CHECK(psi.value()(i, 0) >= 1e-6);
}

TEST_CASE("predicted feedback uses the model's psi and features") {
  AnticipatorModel model(6, AnticipatorConfig{.dz = 4, .hidden = 8}, 2);
  nn::Matrix strategies(2, 6);
  strategies.row(0) = random_vector(6, 7).transpose();
  strategies.row(1) = random_vector(6, 8).transpose();
  const nn::Vector persona = random_vector(6, 9);
  const nn::Vector zp = random_vector(4, 10);
  const auto all = model.predict_all(zp, strategies, persona, 3, 10);
  REQUIRE(all.size() == 2);
  for (int k = 0; k < 2; ++k) {
    const auto one = model.predict_feedback(zp, strategies.row(k).transpose(), persona, 3, 10);
    CHECK((one.mu - all[k].mu).norm() < 1e-10);
    CHECK(one.sigma2 == doctest::Approx(all[k].sigma2));
    CHECK(all[k].strategy == k);
  }
}

TEST_CASE("contrastive loss passes a gradient check") {
  AnticipatorModel model(6, AnticipatorConfig{.dz = 4, .hidden = 8}, 5);
  std::vector<AnticipatorExample> batch;
  for (int k = 0; k < 4; ++k) {
    AnticipatorExample ex;
    if (k > 0) ex.prev_utterance = random_vector(6, 10 + k);
    ex.strategy = random_vector(6, 20 + k);
    ex.persona = random_vector(6, 30 + k);
    ex.reply = random_vector(6, 40 + k);
    ex.turn = 1 + 2 * k;
    batch.push_back(ex);
  }
  const auto res = testing::grad_check(model.parameters(),
                                       [&](nn::Tape& tape) { return contrastive_loss(tape, model, batch, 10).loss; });
  CHECK(res.relative_error < 1e-4);
  CHECK(res.analytic_norm > 0.0);
}
