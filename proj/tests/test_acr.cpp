#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mona/acr.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace mona;
using mona::testing::strip_label;
using mona::testing::tiny_samples;
using mona::testing::tiny_spec;

namespace {

std::vector<PixelRef> refs(int n) {
  std::vector<PixelRef> r;
  for (int i = 0; i < n; ++i) r.push_back({0, i});
  return r;
}

Tensor<double> random_unit_map(int m, int h, int w, Rng& rng) {
  Tensor<double> t({m, h, w});
  for (auto& v : t.values()) v = rng.normal();
  return l2_normalize_channels(Var<double>::constant(t)).value();
}

TrainState<double> tiny_state(std::uint64_t seed) {
  const auto spec = tiny_spec();
  Rng rng(seed);
  return TrainState<double>::create(spec, init_params<double>(spec, rng), 0.99, SgdConfig{});
}

FinetuneOptions tiny_opts() {
  FinetuneOptions o;
  o.n_q = 6;
  o.n_k = 10;
  o.knn = 2;
  o.bank_capacity = 3;
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

// Pointwise "network": logits[c] = w_c * x + b_c commutes with any spatial permutation.
Var<double> pointwise_logits(const Image& x) {
  const int H = x.dim(0), W = x.dim(1);
  Tensor<double> out({3, H, W});
  const double w[3] = {2.0, -1.0, 0.5}, b[3] = {0.1, 0.3, -0.2};
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < H * W; ++p) out[c * H * W + p] = w[c] * x[p] + b[c];
  return Var<double>::constant(out);
}

}  // namespace

TEST(RepresentationSets, TwoPixelCase) {
  Tensor<double> reps({2, 1, 2}, std::vector<double>{1, 0, 0, 1});  // pixel0 = e1, pixel1 = e2
  const auto sets = build_representation_sets<double>({reps}, {{0, 1}}, 2);
  ASSERT_EQ(sets.classes.size(), 2u);
  const auto& c0 = sets.classes[0];
  EXPECT_EQ(c0.queries, (std::vector<PixelRef>{{0, 0}}));
  EXPECT_EQ(c0.keys, (std::vector<PixelRef>{{0, 1}}));
  EXPECT_NEAR(c0.positive_key[0], 1.0, 1e-7);
  EXPECT_NEAR(c0.positive_key[1], 0.0, 1e-15);
  EXPECT_EQ(sets.classes[1].queries, (std::vector<PixelRef>{{0, 1}}));
  EXPECT_NEAR(sets.classes[1].positive_key[1], 1.0, 1e-7);
}

TEST(RepresentationSets, IgnoredPixelsAndMissingClasses) {
  Rng rng(1);
  const auto reps = random_unit_map(4, 2, 3, rng);
  const auto sets = build_representation_sets<double>({reps}, {{0, 0, -1, 2, 2, -1}}, 4);
  ASSERT_EQ(sets.classes.size(), 2u);
  EXPECT_EQ(sets.classes[0].cls, 0);
  EXPECT_EQ(sets.classes[1].cls, 2);
  EXPECT_EQ(sets.find(1), nullptr);
  EXPECT_EQ(sets.classes[0].keys.size(), 2u);
  EXPECT_THROW(build_representation_sets<double>({reps}, {{0, 0, 0, 5, 0, 0}}, 4), std::out_of_range);
}

TEST(RepresentationSets, QueriesAndKeysPartitionLabelledPixels) {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    std::vector<Tensor<double>> reps{random_unit_map(3, 3, 3, rng), random_unit_map(3, 3, 3, rng)};
    std::vector<std::vector<int>> labels(2, std::vector<int>(9));
    int labelled = 0;
    for (auto& l : labels)
      for (auto& v : l) labelled += (v = rng.below(5) - 1) >= 0;
    const auto sets = build_representation_sets(reps, labels, 4);
    for (const auto& cs : sets.classes) {
      EXPECT_EQ(cs.queries.size() + cs.keys.size(), static_cast<std::size_t>(labelled));
      for (const auto& q : cs.queries) EXPECT_EQ(labels[q.image][q.pixel], cs.cls);
      for (const auto& k : cs.keys) EXPECT_NE(labels[k.image][k.pixel], cs.cls);
      double n = 0;
      for (double v : cs.positive_key) n += v * v;
      EXPECT_NEAR(n, 1.0, 1e-6);
    }
  }
}

TEST(EasyHard, ThresholdBoundaries) {
  const auto q = refs(3);
  const std::vector<double> conf{0.98, 0.97, 0.5};
  const auto s = split_easy_hard(q, conf, 0.97);
  EXPECT_EQ(s.easy, (std::vector<PixelRef>{{0, 0}}));
  EXPECT_EQ(s.hard, (std::vector<PixelRef>{{0, 1}, {0, 2}}));
  const auto all_hard = split_easy_hard(q, conf, 1.0);
  EXPECT_TRUE(all_hard.easy.empty());
  EXPECT_EQ(all_hard.hard.size(), 3u);
  EXPECT_THROW(split_easy_hard(q, std::vector<double>{0.1}, 0.5), std::invalid_argument);
}

TEST(EasyHard, PartitionAndMonotoneInDelta) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + rng.below(40);
    const auto q = refs(n);
    std::vector<double> conf(n);
    for (auto& c : conf) c = rng.uniform();
    std::size_t prev_hard = 0;
    for (double d = 0.0; d <= 1.0; d += 0.05) {
      const auto s = split_easy_hard(q, conf, d);
      EXPECT_EQ(s.easy.size() + s.hard.size(), static_cast<std::size_t>(n));
      std::set<int> seen;
      for (const auto& r : s.easy) seen.insert(r.pixel);
      for (const auto& r : s.hard) seen.insert(r.pixel);
      EXPECT_EQ(seen.size(), static_cast<std::size_t>(n));
      EXPECT_GE(s.hard.size(), prev_hard);
      prev_hard = s.hard.size();
    }
  }
}

TEST(SampleAnchors, HardQueriesFirst) {
  Rng rng(4);
  const auto reps = random_unit_map(4, 3, 3, rng);
  const auto sets = build_representation_sets<double>({reps}, {{0, 0, 0, 0, 0, 0, 0, 0, 1}}, 2);
  QuerySplit s0;
  s0.hard = {{0, 0}, {0, 1}, {0, 2}};
  s0.easy = {{0, 3}, {0, 4}, {0, 5}, {0, 6}, {0, 7}};
  QuerySplit s1;
  s1.easy = {{0, 8}};
  const auto a = sample_anchors<double>(sets, {s0, s1}, nullptr, {reps}, 4, 5, rng);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].hard, 3);
  EXPECT_EQ(a[0].easy, 1);
  EXPECT_EQ(std::vector<PixelRef>(a[0].queries.begin(), a[0].queries.begin() + 3), s0.hard);
  EXPECT_EQ(a[0].negatives.shape(), (std::vector<int>{5, 4}));
  // With an empty bank every negative is the one other-class pixel.
  for (int r = 0; r < 5; ++r)
    for (int k = 0; k < 4; ++k) EXPECT_EQ(a[0].negatives.at(r, k), reps[k * 9 + 8]);
  const auto b = sample_anchors<double>(sets, {s0, s1}, nullptr, {reps}, 2, 5, rng);
  EXPECT_EQ(b[0].hard, 2);
  EXPECT_EQ(b[0].easy, 0);
}

TEST(SampleAnchors, BankSuppliesHalfTheNegatives) {
  Rng rng(5);
  const auto reps = random_unit_map(2, 3, 3, rng);
  const auto sets = build_representation_sets<double>({reps}, {{0, 0, 0, 0, 1, 1, 1, 1, 1}}, 2);
  ClassMemoryBank bank(2, 10);
  for (int i = 0; i < 10; ++i) bank.push(1, {7.0, 7.0});
  QuerySplit s0, s1;
  s0.hard = sets.classes[0].queries;
  s1.hard = sets.classes[1].queries;
  const auto a = sample_anchors<double>(sets, {s0, s1}, &bank, {reps}, 2, 8, rng);
  int from_bank = 0;
  for (int r = 0; r < 8; ++r) from_bank += a[0].negatives.at(r, 0) == 7.0;
  EXPECT_EQ(from_bank, 4);
  EXPECT_THROW(sample_anchors<double>(sets, {s0, s1}, &bank, {reps}, 0, 8, rng), std::invalid_argument);
}

TEST(MemoryBank, FifoCapacityTwo) {
  ClassMemoryBank bank(1, 2);
  bank.push(0, {1.0});
  bank.push(0, {2.0});
  bank.push(0, {3.0});
  ASSERT_EQ(bank.size(0), 2u);
  EXPECT_EQ(bank.entries(0)[0], std::vector<double>{2.0});
  EXPECT_EQ(bank.entries(0)[1], std::vector<double>{3.0});
}

TEST(MemoryBank, MatchesReferenceOverRandomSequences) {
  Rng rng(6);
  for (int seq = 0; seq < 1000; ++seq) {
    const int classes = 1 + rng.below(4), cap = 1 + rng.below(5);
    ClassMemoryBank bank(classes, cap);
    oracle::ReferenceFifo ref(classes, cap);
    const int pushes = rng.below(30);
    for (int i = 0; i < pushes; ++i) {
      const int c = rng.below(classes);
      std::vector<double> v{static_cast<double>(seq), static_cast<double>(i)};
      bank.push(c, v);
      ref.push(c, v);
    }
    for (int c = 0; c < classes; ++c) {
      ASSERT_EQ(bank.size(c), ref.buf[c].size());
      ASSERT_LE(static_cast<int>(bank.size(c)), cap);
      for (std::size_t k = 0; k < ref.buf[c].size(); ++k) ASSERT_EQ(bank.entries(c)[k], ref.buf[c][k]);
    }
  }
}

TEST(MemoryBank, NegativesExcludeOwnClass) {
  ClassMemoryBank bank(3, 4);
  bank.push(0, {0.0, 0.0});
  bank.push(1, {1.0, 1.0});
  bank.push(2, {2.0, 2.0});
  bank.push(2, {2.0, 2.5});
  const auto n = bank.negatives(2);
  ASSERT_EQ(n.dim(0), 2);
  EXPECT_EQ(n.at(0, 0), 0.0);
  EXPECT_EQ(n.at(1, 0), 1.0);
  EXPECT_EQ(bank.class_entries(2).dim(0), 2);
  EXPECT_EQ(bank.total_size(), 4u);
  EXPECT_THROW(bank.push(3, {0.0, 0.0}), std::out_of_range);
  EXPECT_THROW(bank.negatives(-1), std::out_of_range);
  EXPECT_THROW(bank.push(0, {0.0}), std::invalid_argument);
  EXPECT_THROW(ClassMemoryBank(0, 1), std::invalid_argument);
}

TEST(ClassGraph, HandCases) {
  Tensor<double> ortho({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto g = class_graph(ortho);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
  Tensor<double> same({2, 2}, std::vector<double>{0.6, 0.8, 0.6, 0.8});
  const auto h = class_graph(same);
  EXPECT_NEAR(h.at(0, 1), 1.0, 1e-15);
  EXPECT_EQ(h.at(0, 0), 0.0);
  EXPECT_THROW(class_graph(Tensor<double>({1, 3})), std::invalid_argument);
}

TEST(ClassGraph, SymmetricWithZeroDiagonal) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const int n = 2 + rng.below(5);
    Tensor<double> p({n, 6});
    for (auto& v : p.values()) v = rng.normal();
    p = l2_normalize_rows(Var<double>::constant(p)).value();
    const auto g = class_graph(p);
    for (int i = 0; i < n; ++i) {
      EXPECT_EQ(g.at(i, i), 0.0);
      for (int j = 0; j < n; ++j) {
        EXPECT_EQ(g.at(i, j), g.at(j, i));
        EXPECT_LE(std::abs(g.at(i, j)), 1.0);
      }
    }
  }
}

TEST(Equivariance, IdentityTransformIsZero) {
  const auto spec = tiny_spec();
  Rng rng(8);
  const auto p = init_params<double>(spec, rng);
  const auto x = tiny_samples(8)[0].image;
  EXPECT_NEAR(equivariance_loss(p, spec, x, TransformRecord::identity(16, 16)).item(), 0.0, 1e-12);
}

TEST(Equivariance, ConstantNetworkIsZero) {
  const auto spec = tiny_spec();
  Rng rng(9);
  auto p = init_params<double>(spec, rng);
  for (auto v : p.vars()) v.mutable_value().fill(0.0);
  const auto x = tiny_samples(9)[0].image;
  const auto flip = TransformRecord::from_affine(16, 16, {-1, 0, 0, 0, 1, 0});
  EXPECT_NEAR(equivariance_loss(p, spec, x, flip).item(), 0.0, 1e-12);
}

TEST(Equivariance, PointwiseMapUnderFlipAndRotation) {
  const auto x = tiny_samples(10)[1].image;
  for (const auto& r : {TransformRecord::from_affine(16, 16, {-1, 0, 0, 0, 1, 0}),
                        TransformRecord::from_affine(16, 16, {0, -1, 0, 1, 0, 0})}) {
    const auto l = equivariance_term(pointwise_logits(x), pointwise_logits(apply_spatial(r, x)), r);
    EXPECT_NEAR(l.item(), 0.0, 1e-12);
    // A non-equivariant pairing is penalised.
    const auto bad = equivariance_term(pointwise_logits(x), pointwise_logits(x), r);
    EXPECT_GT(bad.item(), 1e-3);
  }
}

TEST(FinetuneTotal, WeightedSum) {
  FinetuneTermValues t{0.4, 1, 1, 1, 1};
  EXPECT_NEAR(finetune_total_loss(t, FinetuneLambdas{}), 3.01 + 0.4, 1e-15);
  FinetuneLambdas l{0.5, 2.0, 0.0, 3.0};
  FinetuneTermValues u{1.0, 2.0, 3.0, 4.0, 5.0};
  EXPECT_NEAR(finetune_total_loss(u, l), 1 + 1 + 6 + 0 + 15, 1e-12);
  // Linear in each weight.
  FinetuneLambdas l2 = l;
  l2.eqv *= 2;
  EXPECT_NEAR(finetune_total_loss(u, l2) - finetune_total_loss(u, l), l.eqv * u.eqv, 1e-12);
}

TEST(FinetuneTotal, NonFiniteTermIsNamed) {
  FinetuneTermValues t{0.4, 1, std::nan(""), 1, 1};
  try {
    finetune_total_loss(t, FinetuneLambdas{});
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("L_eqv"), std::string::npos) << e.what();
  }
}

TEST(FinetuneStep, DeterministicForSeed) {
  const auto b = tiny_batches(11);
  auto a = tiny_state(12), c = tiny_state(12);
  ClassMemoryBank ba(4, 3), bc(4, 3);
  Rng ra(13), rc(13);
  for (int i = 0; i < 2; ++i) {
    const auto la = finetune_step(a, ba, b.labeled, b.unlabeled, b.pool, ra, tiny_opts());
    const auto lc = finetune_step(c, bc, b.labeled, b.unlabeled, b.pool, rc, tiny_opts());
    EXPECT_EQ(la.total, lc.total);
    EXPECT_EQ(la.hard_counts, lc.hard_counts);
  }
  for (std::size_t i = 0; i < a.pair.student.size(); ++i)
    EXPECT_EQ(a.pair.student.vars()[i].value().storage(), c.pair.student.vars()[i].value().storage());
}

TEST(FinetuneStep, BankStaysWithinCapacity) {
  const auto b = tiny_batches(14);
  auto st = tiny_state(15);
  ClassMemoryBank bank(4, 3);
  Rng rng(16);
  for (int i = 0; i < 5; ++i) {
    const auto l = finetune_step(st, bank, b.labeled, b.unlabeled, b.pool, rng, tiny_opts());
    EXPECT_TRUE(std::isfinite(l.total));
    EXPECT_GT(l.contrast, 0.0);
    for (int c = 0; c < 4; ++c) EXPECT_LE(bank.size(c), 3u);
  }
  EXPECT_GT(bank.total_size(), 0u);
  auto raw = tiny_opts();
  raw.bank_raw_pixels = true;
  ClassMemoryBank pix(4, 3);
  finetune_step(st, pix, b.labeled, b.unlabeled, b.pool, rng, raw);
  for (int c = 0; c < 4; ++c) EXPECT_LE(pix.size(c), 3u);
}

TEST(FinetuneStep, ZeroWeightsEqualSupervisedStep) {
  const auto b = tiny_batches(17);
  auto ft = tiny_opts();
  ft.lambda = {0.0, 0.0, 0.0, 0.0};
  PretrainOptions pre;
  pre.instance_losses = false;
  pre.augment = ft.augment;
  auto a = tiny_state(18), c = tiny_state(18);
  ClassMemoryBank bank(4, 3);
  Rng ra(19), rc(19);
  const auto la = finetune_step(a, bank, b.labeled, b.unlabeled, b.pool, ra, ft);
  const auto lc = pretrain_step(c, b.labeled, b.unlabeled, b.pool, rc, pre);
  EXPECT_EQ(la.total, lc.total);
  EXPECT_EQ(bank.total_size(), 0u);
  for (std::size_t i = 0; i < a.pair.student.size(); ++i) {
    EXPECT_EQ(a.pair.student.vars()[i].value().storage(), c.pair.student.vars()[i].value().storage());
    EXPECT_EQ(a.pair.teacher.vars()[i].value().storage(), c.pair.teacher.vars()[i].value().storage());
  }
}

TEST(FinetuneStep, EmptyLabeledBatchThrows) {
  const auto b = tiny_batches(20);
  auto st = tiny_state(21);
  ClassMemoryBank bank(4, 3);
  Rng rng(22);
  EXPECT_THROW(finetune_step(st, bank, {}, b.unlabeled, b.pool, rng, tiny_opts()), std::invalid_argument);
}
