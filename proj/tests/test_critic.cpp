#include <doctest.h>

#include <cmath>

#include "ug/critic.hpp"
#include "ug/rng.hpp"

using ug::Critic;
using ug::CriticConfig;
using ug::CriticGroup;
using ug::RngState;
using ug::Tensor;

namespace {

// Gaussian cloud of fake universal-state sequences: [T x b x d] centered
// at `center` along the first axis.
CriticGroup cloud(int T, int b, int d, float center, float spread, RngState& rng) {
  CriticGroup g;
  g.states = Tensor({T, b, d});
  for (size_t i = 0; i < g.states.numel(); ++i)
    g.states.data[i] = spread * static_cast<float>(rng.normal());
  for (int t = 0; t < T; ++t)
    for (int r = 0; r < b; ++r) g.states.data[(static_cast<size_t>(t) * b + r) * d] += center;
  g.lengths.assign(static_cast<size_t>(b), T);
  return g;
}

CriticConfig small_cfg(int m = 2) {
  CriticConfig c;
  c.input_dim = 16;
  c.hidden_dim = 16;
  c.num_langs = m;
  return c;
}

}  // namespace

TEST_CASE("scores: m x m shape and eval determinism") {
  Critic c3(
      [] {
        CriticConfig c = small_cfg(3);
        return c;
      }(),
      RngState(1));
  RngState rng(2);
  Tensor seq = Tensor::normal({5, 16}, 0.f, 1.f, rng);
  const Tensor s = c3.scores(seq);
  CHECK(s.shape == std::vector<int>{3, 3});
  const Tensor s2 = c3.scores(seq);
  CHECK(s.data == s2.data);

  Critic c2(small_cfg(2), RngState(1));
  CHECK(c2.scores(seq).numel() == 4);
}

TEST_CASE("wasserstein_estimate: identical collections give exactly zero") {
  Critic critic(small_cfg(2), RngState(3));
  RngState rng(4);
  CriticGroup g = cloud(4, 6, 16, 0.5f, 1.0f, rng);
  const auto est = critic.wasserstein_estimate({g, g});
  CHECK(est.matrix.at(0, 0) == 0.0f);
  CHECK(est.matrix.at(1, 1) == 0.0f);
  CHECK(est.matrix.at(0, 1) == 0.0f);
  CHECK(est.matrix.at(1, 0) == 0.0f);
  CHECK(est.sample_counts == std::vector<int>{6, 6});
}

TEST_CASE("wasserstein_estimate: single samples reduce to score differences") {
  Critic critic(small_cfg(2), RngState(5));
  RngState rng(6);
  CriticGroup a = cloud(3, 1, 16, 1.0f, 0.5f, rng);
  CriticGroup b = cloud(3, 1, 16, -1.0f, 0.5f, rng);
  const auto est = critic.wasserstein_estimate({a, b});
  const Tensor sa = critic.scores(Tensor({3, 16}, a.states.data));
  const Tensor sb = critic.scores(Tensor({3, 16}, b.states.data));
  CHECK(est.matrix.at(0, 1) ==
        doctest::Approx(sa.at(0, 1) - sb.at(0, 1)).epsilon(1e-5));
  CHECK(est.matrix.at(1, 0) ==
        doctest::Approx(sa.at(1, 0) - sb.at(1, 0)).epsilon(1e-5));
}

TEST_CASE("estimate errors on an empty language group") {
  Critic critic(small_cfg(2), RngState(7));
  RngState rng(8);
  CriticGroup a = cloud(3, 2, 16, 0.f, 1.f, rng);
  CriticGroup empty;
  CHECK_THROWS_AS(critic.wasserstein_estimate({a, empty}), ug::CriticError);
}

TEST_CASE("clip_params: clamp invariant, idempotence, validation") {
  Critic critic(small_cfg(2), RngState(9));
  critic.clip_params(0.01f);
  for (auto* p : critic.params())
    for (const float v : p->value.data) CHECK(std::abs(v) <= 0.01f);
  std::vector<std::vector<float>> before;
  for (auto* p : critic.params()) before.push_back(p->value.data);
  critic.clip_params(0.01f);
  size_t i = 0;
  for (auto* p : critic.params()) CHECK(p->value.data == before[i++]);
  CHECK_THROWS_AS(critic.clip_params(-1.0f), ug::NumericsError);
  // running statistics are exempt from clamping
  CHECK(critic.bn_stats().var.data[0] == 1.0f);
}

TEST_CASE("critic_update: clamp holds, samples untouched, inputs constant") {
  Critic critic(small_cfg(2), RngState(10));
  RngState rng(11);
  CriticGroup a = cloud(4, 5, 16, 1.0f, 0.3f, rng);
  CriticGroup b = cloud(4, 5, 16, -1.0f, 0.3f, rng);
  const Tensor a_before = a.states;

  ug::RmsPropT<float> opt(critic.params(), 5e-5f);
  for (int i = 0; i < 5; ++i) critic.update({a, b}, opt);
  for (auto* p : critic.params())
    for (const float v : p->value.data) CHECK(std::abs(v) <= critic.config().clip);
  CHECK(a.states.data == a_before.data);

  CriticGroup lone = cloud(4, 5, 16, 0.f, 1.f, rng);
  CHECK_THROWS_AS(critic.update({lone}, opt), ug::CriticError);
}

TEST_CASE("critic training: objective trend is non-decreasing on frozen clouds") {
  Critic critic(small_cfg(2), RngState(12));
  RngState rng(13);
  CriticGroup a = cloud(4, 8, 16, 1.0f, 0.3f, rng);
  CriticGroup b = cloud(4, 8, 16, -1.0f, 0.3f, rng);
  ug::RmsPropT<float> opt(critic.params(), 1e-3f);
  std::vector<float> values;
  for (int i = 0; i < 200; ++i) values.push_back(critic.update({a, b}, opt));
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += values[static_cast<size_t>(i)];
    last += values[values.size() - 1 - static_cast<size_t>(i)];
  }
  CHECK(last > first);
}

TEST_CASE("separation oracle: trained estimate grows with cloud distance") {
  // Same seed everywhere; only the separation changes. The estimate for
  // separated clouds must dwarf the same-distribution baseline and grow
  // monotonically with the separation.
  auto trained_estimate = [](float delta) {
    Critic critic(small_cfg(2), RngState(20));
    RngState rng(21);
    CriticGroup a = cloud(4, 8, 16, delta / 2, 0.1f, rng);
    CriticGroup b = cloud(4, 8, 16, -delta / 2, 0.1f, rng);
    ug::RmsPropT<float> opt(critic.params(), 1e-3f);
    for (int i = 0; i < 500; ++i) critic.update({a, b}, opt);
    return critic.wasserstein_estimate({a, b}).mean_off_diagonal();
  };
  const double same = std::abs(trained_estimate(0.0f));
  const double d05 = trained_estimate(0.5f);
  const double d1 = trained_estimate(1.0f);
  const double d2 = trained_estimate(2.0f);
  CHECK(d05 > 0.0);
  CHECK(d05 < d1);
  CHECK(d1 < d2);
  CHECK(d2 > 10.0 * same);
}

TEST_CASE("boundedness: no NaN under input fuzzing with clamped parameters") {
  Critic critic(small_cfg(2), RngState(30));
  critic.clip_params();
  RngState rng(31);
  for (int i = 0; i < 50; ++i) {
    const int T = 1 + static_cast<int>(rng.next_below(6));
    Tensor seq({T, 16});
    for (auto& v : seq.data)
      v = static_cast<float>(rng.uniform(-50.0, 50.0));
    const Tensor s = critic.scores(seq);
    CHECK(s.all_finite());
  }
}
