#include <gtest/gtest.h>

#include <cmath>

#include "mona/theory.hpp"
#include "support/oracles.hpp"

using namespace mona::theory;

TEST(Rademacher, HandValueAndScaling) {
  EXPECT_DOUBLE_EQ(rademacher_bound({{1, 1}, {1, 2}, 100}), 0.4);
  mona::Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    BasisSpec s;
    const int m = 1 + rng.below(6);
    for (int j = 0; j < m; ++j) {
      s.C.push_back(rng.uniform(0.1, 3));
      s.V.push_back(rng.uniform(0.1, 3));
    }
    s.n = 1 + rng.below(1000);
    const double b = rademacher_bound(s);
    BasisSpec scaled = s;
    for (auto& c : scaled.C) c *= 4;
    EXPECT_NEAR(rademacher_bound(scaled), 4 * b, 1e-12 * b);
    BasisSpec more = s;
    more.n *= 4;
    EXPECT_NEAR(rademacher_bound(more), b / 2, 1e-12 * b);
  }
}

TEST(Rademacher, RejectsBadInput) {
  EXPECT_THROW(rademacher_bound({{1, 0}, {1, 1}, 10}), std::invalid_argument);
  EXPECT_THROW(rademacher_bound({{1}, {-1}, 10}), std::invalid_argument);
  EXPECT_THROW(rademacher_bound({{1}, {1, 2}, 10}), std::invalid_argument);
  EXPECT_THROW(rademacher_bound({{}, {}, 10}), std::invalid_argument);
  EXPECT_THROW(rademacher_bound({{1}, {1}, 0}), std::invalid_argument);
}

TEST(SelfDistill, ZeroTargetsGiveZeroSolutions) {
  auto p = make_problem(20, 1);
  std::fill(p.y0.begin(), p.y0.end(), 0.0);
  const auto h = self_distill_simulate(p);
  ASSERT_EQ(h.steps.size(), 10u);
  for (const auto& st : h.steps)
    for (double c : st.func_coef) EXPECT_EQ(c, 0.0);
}

TEST(SelfDistill, FirstStepMatchesRidgeOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = make_problem(20, seed, 1);
    const auto h = self_distill_simulate(p);
    ASSERT_EQ(h.steps.size(), 1u);
    const auto K = gram_matrix(p.x, p.width);
    const auto eb = eigenbasis(K);
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(p.y0.data(), 20);
    const auto want = mona::oracle::ridge_alpha_eigen(K, y, h.steps[0].eta, eb.V);
    for (int i = 0; i < 20; ++i) EXPECT_NEAR(h.steps[0].alpha_coef[i], want[i], 1e-10) << seed << " " << i;
    EXPECT_LE(h.steps[0].train_mse, p.epsilon);
    EXPECT_GE(h.steps[0].train_mse, 0.9 * p.epsilon);
  }
}

TEST(SelfDistill, Deterministic) {
  const auto a = self_distill_simulate(make_problem(20, 3));
  const auto b = self_distill_simulate(make_problem(20, 3));
  for (std::size_t t = 0; t < a.steps.size(); ++t) EXPECT_EQ(a.steps[t].func_coef, b.steps[t].func_coef);
}

TEST(SelfDistill, ParticipationNonincreasingOnRandomInstances) {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const auto h = self_distill_simulate(make_problem(20, seed));
    const auto r = sparsification_report(h);
    EXPECT_TRUE(r.participation_nonincreasing) << seed;
    for (std::size_t t = 1; t < r.participation.size(); ++t)
      if (std::isfinite(r.participation[t])) {
        EXPECT_LE(r.participation[t], r.participation[t - 1] + 1e-8) << seed;
      }
  }
}

TEST(SelfDistill, Errors) {
  auto p = make_problem(20, 4);
  p.x[1] = p.x[0];  // duplicate input: singular Gram matrix
  EXPECT_THROW(self_distill_simulate(p), std::runtime_error);
  auto q = make_problem(20, 4);
  q.epsilon = 1e-300;
  EXPECT_THROW(self_distill_simulate(q), std::runtime_error);
  auto r = make_problem(20, 4);
  r.y0.pop_back();
  EXPECT_THROW(self_distill_simulate(r), std::invalid_argument);
}

TEST(Sparsification, SelfRatioTopShareAndSpread) {
  for (std::uint64_t seed = 200; seed < 205; ++seed) {
    const auto h = self_distill_simulate(make_problem(20, seed));
    const auto r = sparsification_report(h, 1e-8, {{0, 0}, {2, 2}, {0, 5}});
    for (const auto& d : r.dominance) {
      EXPECT_EQ(d[0], 1.0);
      EXPECT_EQ(d[1], 1.0);
    }
    EXPECT_TRUE(r.top_share_nondecreasing) << seed;
    EXPECT_GT(r.max_over_median.back(), r.max_over_median.front()) << seed;
    EXPECT_LT(r.coefficient_norm_last, r.coefficient_norm_first);
  }
}

TEST(Sparsification, ParticipationRatioEndpoints) {
  EXPECT_DOUBLE_EQ(participation_ratio({1, 1, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(participation_ratio({0, -3, 0, 0}), 0.25);
  EXPECT_TRUE(std::isnan(participation_ratio({0, 0})));
}

TEST(Sparsification, NeedsTwoSteps) {
  const auto h = self_distill_simulate(make_problem(20, 5, 1));
  EXPECT_THROW(sparsification_report(h), std::invalid_argument);
}
