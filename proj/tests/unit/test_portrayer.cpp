#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support/gradcheck.hpp"
#include "udp/error.hpp"
#include "udp/util.hpp"
#include "udp/nn/ops.hpp"
#include "udp/portrayer.hpp"

using namespace udp;

namespace {

nn::Matrix random_matrix(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n;
  nn::Matrix m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
  return m;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kInvariant;
}

}  // namespace

TEST_CASE("linear beta schedule matches a direct product") {
  const auto s = make_schedule();
  REQUIRE(s.betas.size() == 1001);
  CHECK(s.betas[1] == doctest::Approx(1e-4));
  CHECK(s.betas[1000] == doctest::Approx(0.02));
  CHECK(s.betas[500] == doctest::Approx(1e-4 + (0.02 - 1e-4) * 499.0 / 999.0));
  double prod = 1.0;
  for (int i = 1; i <= 1000; ++i) {
    prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (i - 1) / 999.0);
    if (i % 100 == 0) CHECK(s.alphas_bar[i] == doctest::Approx(prod).epsilon(1e-12));
  }
  CHECK(s.alphas_bar[0] == 1.0);
  CHECK(s.steps_per_turn() == 100);
}

TEST_CASE("turn noise indices run 1000, 900, ..., 0") {
  const auto s = make_schedule();
  for (int t = 0; t <= 10; ++t) CHECK(turn_noise_index(t, s) == 1000 - 100 * t);
  CHECK(kind_of([&] { turn_noise_index(11, s); }) == ErrorKind::kArgument);
  CHECK(kind_of([&] { turn_noise_index(-1, s); }) == ErrorKind::kArgument);
}

TEST_CASE("schedule rejects indivisible turn counts and bad betas") {
  CHECK(kind_of([] { make_schedule(1000, 7); }) == ErrorKind::kConfiguration);
  CHECK(kind_of([] { make_schedule(1000, 10, 0.02, 1e-4); }) == ErrorKind::kConfiguration);
  CHECK(kind_of([] { make_schedule(1000, 10, 0.0, 0.02); }) == ErrorKind::kConfiguration);
}

TEST_CASE("x0 estimate inverts forward noising at every turn boundary") {
  const auto s = make_schedule();
  Rng rng(4);
  const nn::Vector x0 = random_matrix(12, 1, 1).col(0);
  for (int t = 0; t < 10; ++t) {
    const int i = turn_noise_index(t, s);
    const auto noised = forward_noise(x0, i, s, rng);
    const double ab = s.alphas_bar[i];
    CHECK((noised.x - (std::sqrt(ab) * x0 + std::sqrt(1 - ab) * noised.eps)).norm() < 1e-12);
    CHECK((estimate_x0(noised.x, noised.eps, i, s) - x0).norm() < 1e-6);
  }
}

TEST_CASE("x0 estimate refuses a vanishing alpha bar") {
  const auto s = make_schedule(1000, 10, 0.3, 0.9);
  REQUIRE(s.alphas_bar[1000] < 1e-12);
  const nn::Vector x = nn::Vector::Ones(4);
  CHECK(kind_of([&] { estimate_x0(x, x, 1000, s); }) == ErrorKind::kNumericalDomain);
  CHECK_NOTHROW(estimate_x0(x, x, 1, s));
}

TEST_CASE("persona distribution is a cosine softmax at temperature 0.1") {
  const nn::Matrix bank = random_matrix(5, 6, 2);
  const nn::Vector x = random_matrix(6, 1, 3).col(0);
  const auto d = persona_distribution(x, bank, 0.1);
  std::vector<double> expect(5);
  for (int j = 0; j < 5; ++j) expect[j] = std::exp(bank.row(j).dot(x.transpose()) / (bank.row(j).norm() * x.norm()) / 0.1);
  const double z = std::accumulate(expect.begin(), expect.end(), 0.0);
  for (int j = 0; j < 5; ++j) CHECK(d.probs[j] == doctest::Approx(expect[j] / z).epsilon(1e-10));

  // An x0 pointing exactly at a persona ranks it first, for any scale.
  for (int j = 0; j < 5; ++j) {
    const nn::Vector target = 3.7 * bank.row(j).transpose();
    CHECK(persona_distribution(target, bank, 0.1).argmax() == j);
  }
}

TEST_CASE("persona distributions are on the simplex for random inputs") {
  const nn::Matrix bank = random_matrix(16, 8, 5);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const nn::Vector x = random_matrix(8, 1, 100 + seed).col(0);
    const auto d = persona_distribution(x, bank, 0.1);
    double total = 0.0;
    for (double p : d.probs) {
      CHECK(p >= 0.0);
      total += p;
    }
    CHECK(total == doctest::Approx(1.0));
  }
}

TEST_CASE("uniform logits over 16 personas give cross entropy ln 16") {
  nn::Tape tape;
  const std::vector<int> labels{3};
  const auto ce = nn::cross_entropy(tape.constant(nn::Matrix::Zero(1, 16)), labels);
  CHECK(ce.item() == doctest::Approx(std::log(16.0)));
}

TEST_CASE("denoising leaves the state exactly at each turn's noise index") {
  const auto s = make_schedule();
  PortrayerModel model(random_matrix(4, 6, 6), 6, PortrayerConfig{.hidden = 12}, 9);
  auto state = init_portrayer_state(s, 6, 11);
  CHECK(state.i == 1000);
  const nn::Vector condition = random_matrix(6, 1, 12).col(0);
  std::vector<int> seen;
  for (int t = 1; t <= 10; ++t) {
    const auto d = denoise_turn(state, condition, s, model);
    CHECK(d.turn == t);
    seen.push_back(state.i);
  }
  CHECK(seen == std::vector<int>{900, 800, 700, 600, 500, 400, 300, 200, 100, 0});
  CHECK_THROWS_AS(denoise_turn(state, condition, s, model), Error);
}

TEST_CASE("batched denoising matches one state at a time") {
  const auto s = make_schedule();
  PortrayerModel model(random_matrix(4, 6, 6), 6, PortrayerConfig{.hidden = 12}, 9);
  auto a = init_portrayer_state(s, 6, 21), b = init_portrayer_state(s, 6, 22);
  auto a2 = a, b2 = b;
  const nn::Matrix conditions = random_matrix(2, 6, 13);
  std::vector<PortrayerState*> states{&a, &b};
  for (int t = 1; t <= 3; ++t) {
    const auto batch = denoise_turn_batch(states, conditions, s, model);
    const auto da = denoise_turn(a2, conditions.row(0).transpose(), s, model);
    const auto db = denoise_turn(b2, conditions.row(1).transpose(), s, model);
    for (int j = 0; j < 4; ++j) {
      CHECK(batch[0].probs[j] == doctest::Approx(da.probs[j]).epsilon(1e-9));
      CHECK(batch[1].probs[j] == doctest::Approx(db.probs[j]).epsilon(1e-9));
    }
  }
}

TEST_CASE("portrayer loss passes a gradient check") {
  const auto s = make_schedule(100, 10);
  PortrayerModel model(random_matrix(3, 5, 7), 4, PortrayerConfig{.hidden = 10, .step_features = 6}, 3, 100);
  std::vector<PortrayerExample> batch;
  for (int k = 0; k < 4; ++k) batch.push_back({random_matrix(4, 1, 40 + k).col(0), 1 + 2 * k, k % 3});
  const auto res = testing::grad_check(model.parameters(), [&](nn::Tape& tape) {
    Rng rng(5);
    return portrayer_loss(tape, model, batch, s, rng);
  });
  CHECK(res.relative_error < 1e-4);
  CHECK(res.analytic_norm > 0.0);
}
