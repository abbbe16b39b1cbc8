#include <gtest/gtest.h>

#include <cmath>

#include "mona/pretrain.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace mona;
using mona::testing::strip_label;
using mona::testing::tiny_samples;
using mona::testing::tiny_spec;

namespace {

Tensor<double> rows(std::vector<std::vector<double>> r) {
  Tensor<double> t({static_cast<int>(r.size()), static_cast<int>(r[0].size())});
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t k = 0; k < r[i].size(); ++k) t.at(static_cast<int>(i), static_cast<int>(k)) = r[i][k];
  return t;
}

std::vector<double> probs(const RelationDistribution& d) {
  std::vector<double> p;
  for (double l : d.log_probs) p.push_back(std::exp(l));
  return p;
}

TrainState<double> tiny_state(std::uint64_t seed) {
  const auto spec = tiny_spec();
  Rng rng(seed);
  return TrainState<double>::create(spec, init_params<double>(spec, rng), 0.99, SgdConfig{});
}

PretrainOptions tiny_opts() {
  PretrainOptions o;
  o.mined_views = 4;
  o.local_crops = 2;
  o.local_crop_size = 8;
  return o;
}

struct Batches {
  std::vector<Sample2D> labeled, unlabeled, pool;
};

Batches tiny_batches(std::uint64_t seed) {
  auto data = tiny_samples(seed);
  Batches b;
  b.labeled = {data[0], data[1]};
  for (std::size_t i = 2; i < data.size(); ++i) b.pool.push_back(strip_label(data[i]));
  b.unlabeled = {b.pool[0], b.pool[1]};
  return b;
}

}  // namespace

TEST(RelationDistribution, HandComputedTwoViews) {
  const std::vector<double> anchor{1, 0};
  const auto d = relation_distribution(anchor, rows({{1, 0}, {0, 1}}), 0.1);
  const auto p = probs(d);
  EXPECT_NEAR(p[0], 0.9999546, 1e-7);
  EXPECT_NEAR(p[1], 0.0000454, 1e-7);
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-15);
}

TEST(RelationDistribution, IdenticalMinedViewsGiveUniform) {
  const std::vector<double> anchor{0.6, 0.8};
  const auto p = probs(relation_distribution(anchor, rows({{0, 1}, {0, 1}, {0, 1}}), 0.01));
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(RelationDistribution, HugeTemperatureIsUniform) {
  const std::vector<double> anchor{1, 0};
  const auto p = probs(relation_distribution(anchor, rows({{1, 0}, {0, 1}, {-1, 0}, {0.6, 0.8}}), 1e6));
  for (double v : p) EXPECT_NEAR(v, 0.25, 1e-5);
}

TEST(RelationDistribution, Errors) {
  const std::vector<double> anchor{1, 0};
  EXPECT_THROW(relation_distribution(anchor, rows({{1, 0}, {0, 1}}), 0.0), std::invalid_argument);
  EXPECT_THROW(relation_distribution(anchor, rows({{1, 0}}), 0.1), std::invalid_argument);
  EXPECT_THROW(relation_distribution(anchor, rows({{1, 0, 0}, {0, 1, 0}}), 0.1), std::invalid_argument);
}

TEST(RelationDistribution, PermutingMinedViewsPermutesProbabilities) {
  Rng r(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(5);
    for (auto& v : a) v = r.normal();
    normalize_in_place(a);
    Tensor<double> m({6, 5});
    for (auto& v : m.values()) v = r.normal();
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Tensor<double> pm({6, 5});
    for (int i = 0; i < 6; ++i)
      for (int k = 0; k < 5; ++k) pm.at(i, k) = m.at(perm[i], k);
    const auto p = relation_distribution(a, m, 0.1).log_probs;
    const auto q = relation_distribution(a, pm, 0.1).log_probs;
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(q[i], p[perm[i]], 1e-12);
  }
}

TEST(InstanceLoss, NearOneHotAgainstUniform) {
  RelationDistribution s, t;
  s.log_probs = {std::log1p(-1e-9), std::log(1e-9)};
  t.log_probs = {std::log(0.5), std::log(0.5)};
  EXPECT_NEAR(instance_discrimination_loss(s, t), 0.6931, 1e-4);
  EXPECT_NEAR(instance_discrimination_loss(s, t), std::log(2.0), 1e-6);
}

TEST(InstanceLoss, NonnegativeAndZeroIffEqual) {
  Rng r(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> za(6), zb(6);
    for (auto& v : za) v = 3 * r.normal();
    for (auto& v : zb) v = 3 * r.normal();
    RelationDistribution a, b;
    for (double p : oracle::softmax(za)) a.log_probs.push_back(std::log(p));
    for (double p : oracle::softmax(zb)) b.log_probs.push_back(std::log(p));
    EXPECT_GT(instance_discrimination_loss(a, b), 0.0);
    EXPECT_GT(instance_discrimination_loss(b, a), 0.0);
    EXPECT_NEAR(instance_discrimination_loss(a, a), 0.0, 1e-15);
    EXPECT_NEAR(instance_discrimination_loss(a, b), oracle::kl(oracle::softmax(za), oracle::softmax(zb)), 1e-12);
  }
  RelationDistribution s;
  s.log_probs = {0.0};
  RelationDistribution t2;
  t2.log_probs = {std::log(0.5), std::log(0.5)};
  EXPECT_THROW(instance_discrimination_loss(s, t2), std::invalid_argument);
}

TEST(InstanceLoss, BatchedMatchesScalarPath) {
  Rng r(6);
  Tensor<double> anchors({3, 4}), mined({5, 4});
  for (auto& v : anchors.values()) v = r.normal();
  for (auto& v : mined.values()) v = r.normal();
  const auto lp = relation_log_probs(Var<double>::constant(anchors), mined, 0.1).value();
  for (int i = 0; i < 3; ++i) {
    const auto d = relation_distribution(anchors.row(i), mined, 0.1);
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(lp.at(i, j), d.log_probs[j], 1e-12);
  }
}

TEST(PretrainStep, DeterministicForSeed) {
  const auto b = tiny_batches(1);
  auto s1 = tiny_state(2), s2 = tiny_state(2);
  Rng r1(3), r2(3);
  for (int i = 0; i < 2; ++i) {
    const auto a = pretrain_step(s1, b.labeled, b.unlabeled, b.pool, r1, tiny_opts());
    const auto c = pretrain_step(s2, b.labeled, b.unlabeled, b.pool, r2, tiny_opts());
    EXPECT_EQ(a.total, c.total);
    EXPECT_EQ(a.inst_local, c.inst_local);
  }
  for (std::size_t i = 0; i < s1.pair.student.size(); ++i)
    EXPECT_EQ(s1.pair.student.vars()[i].value().storage(), s2.pair.student.vars()[i].value().storage());
}

TEST(PretrainStep, TeacherIsEmaOfUpdatedStudent) {
  const auto b = tiny_batches(4);
  auto st = tiny_state(5);
  // Start from a teacher that differs from the student.
  for (auto v : st.pair.teacher.vars()) v.mutable_value().fill(0.01);
  std::vector<Tensor<double>> old;
  for (const auto& v : st.pair.teacher.vars()) old.push_back(v.value());
  Rng rng(6);
  const auto loss = pretrain_step(st, b.labeled, b.unlabeled, b.pool, rng, tiny_opts());
  EXPECT_TRUE(std::isfinite(loss.total));
  for (std::size_t i = 0; i < old.size(); ++i) {
    const auto& s = st.pair.student.vars()[i].value();
    const auto& t = st.pair.teacher.vars()[i].value();
    for (std::size_t j = 0; j < t.size(); ++j) ASSERT_NEAR(t[j], 0.99 * old[i][j] + 0.01 * s[j], 1e-14);
  }
}

TEST(PretrainStep, TeacherReceivesNoGradient) {
  const auto b = tiny_batches(7);
  auto st = tiny_state(8);
  st.pair.momentum = 0.0;  // teacher <- student exactly
  Rng rng(9);
  pretrain_step(st, b.labeled, b.unlabeled, b.pool, rng, tiny_opts());
  for (std::size_t i = 0; i < st.pair.teacher.size(); ++i) {
    EXPECT_FALSE(st.pair.teacher.vars()[i].requires_grad());
    EXPECT_EQ(st.pair.teacher.vars()[i].value().storage(), st.pair.student.vars()[i].value().storage());
  }
}

TEST(PretrainStep, InstanceLossesOffEqualsSupervisedStep) {
  const auto b = tiny_batches(10);
  auto opt = tiny_opts();
  opt.instance_losses = false;
  auto a = tiny_state(11), c = tiny_state(11);
  Rng ra(12), rc(12);
  const auto la = pretrain_step(a, b.labeled, b.unlabeled, b.pool, ra, opt);
  const auto lc = pretrain_step(c, b.labeled, {}, {}, rc, opt);
  EXPECT_EQ(la.total, la.sup);
  EXPECT_EQ(la.inst_global, 0.0);
  EXPECT_EQ(la.total, lc.total);
  for (std::size_t i = 0; i < a.pair.student.size(); ++i)
    EXPECT_EQ(a.pair.student.vars()[i].value().storage(), c.pair.student.vars()[i].value().storage());
}

TEST(PretrainStep, ErrorsOnEmptyBatchOrSmallPool) {
  const auto b = tiny_batches(13);
  auto st = tiny_state(14);
  Rng rng(15);
  EXPECT_THROW(pretrain_step(st, {}, {}, b.pool, rng, tiny_opts()), std::invalid_argument);
  auto opt = tiny_opts();
  opt.mined_views = 100;
  EXPECT_THROW(pretrain_step(st, b.labeled, b.unlabeled, b.pool, rng, opt), std::invalid_argument);
}

TEST(PretrainStep, SupervisedStepsReduceLoss) {
  const auto b = tiny_batches(16);
  auto st = tiny_state(17);
  auto opt = tiny_opts();
  opt.instance_losses = false;
  opt.augment = AugmentParams::identity();
  Rng rng(18);
  std::vector<double> l;
  for (int i = 0; i < 50; ++i) l.push_back(pretrain_step(st, b.labeled, {}, {}, rng, opt).sup);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += l[i];
    last += l[40 + i];
  }
  EXPECT_LT(last, first);
}
