#include <gtest/gtest.h>

#include <cmath>

#include "mona/losses.hpp"
#include "mona/nets.hpp"
#include "mona/pretrain.hpp"
#include "support/fixtures.hpp"

using namespace mona;
using mona::testing::tiny_samples;
using mona::testing::tiny_spec;

namespace {

Tensor<double> image_of(const Sample2D& s) { return to_input<double>(s.image); }

void fill_all(ParamSet<double>& p, double v) {
  for (auto var : p.vars()) var.mutable_value().fill(v);
}

}  // namespace

TEST(Nets, OutputShapes) {
  const auto spec = tiny_spec();
  Rng rng(1);
  const auto p = init_params<double>(spec, rng);
  const auto data = tiny_samples(1);
  const auto out = forward(p, spec, image_of(data[0]));
  EXPECT_EQ(out.logits.shape(), (std::vector<int>{4, 16, 16}));
  ASSERT_EQ(out.features.size(), 3u);
  EXPECT_EQ(out.features[0].shape(), (std::vector<int>{8, 16, 16}));
  EXPECT_EQ(out.features[2].shape(), (std::vector<int>{32, 4, 4}));
  EXPECT_EQ(out.global.shape(), (std::vector<int>{1, 32}));
  EXPECT_EQ(project_global(p, out.global).shape(), (std::vector<int>{1, 16}));
  EXPECT_EQ(representation_head(p, out.features).shape(), (std::vector<int>{16, 16, 16}));
}

TEST(Nets, WrongImageSizeThrows) {
  const auto spec = tiny_spec();
  Rng rng(1);
  const auto p = init_params<double>(spec, rng);
  EXPECT_THROW(forward(p, spec, Tensor<double>({1, 8, 8})), std::invalid_argument);
  auto bad = spec;
  bad.image_size = 18;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Nets, ZeroWeightsGiveUniformSoftmax) {
  const auto spec = tiny_spec();
  Rng rng(2);
  auto p = init_params<double>(spec, rng);
  fill_all(p, 0.0);
  const auto data = tiny_samples(2);
  const auto probs = softmax_channels(forward(p, spec, image_of(data[0])).logits.value());
  for (double v : probs.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Nets, RepresentationsAreUnitNorm) {
  const auto spec = tiny_spec();
  Rng rng(3);
  const auto p = init_params<double>(spec, rng);
  const auto data = tiny_samples(3);
  const auto r = representation_head(p, forward(p, spec, image_of(data[1])).features).value();
  const int m = r.dim(0), n = r.dim(1) * r.dim(2);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int c = 0; c < m; ++c) s += r[c * n + i] * r[c * n + i];
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(Nets, LocalProjectionOneRowPerCrop) {
  const auto spec = tiny_spec();
  Rng rng(4);
  const auto p = init_params<double>(spec, rng);
  const auto data = tiny_samples(4);
  const auto logits = forward(p, spec, image_of(data[0])).logits;
  const auto windows = random_crop_windows(16, 4, 8, rng);
  for (const auto& w : windows) {
    EXPECT_LE(w.y + w.size, 16);
    EXPECT_LE(w.x + w.size, 16);
  }
  for (bool pred : {false, true}) {
    const auto v = local_project(p, logits, windows, pred).value();
    EXPECT_EQ(v.shape(), (std::vector<int>{4, 16}));
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (double x : v.row(r)) s += x * x;
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    }
  }
  EXPECT_THROW(random_crop_windows(16, 1, 17, rng), std::invalid_argument);
}

TEST(Nets, InitIsDeterministic) {
  const auto spec = tiny_spec();
  Rng a(5), b(5), c(6);
  const auto pa = init_params<double>(spec, a);
  const auto pb = init_params<double>(spec, b);
  const auto pc = init_params<double>(spec, c);
  ASSERT_TRUE(pa.same_layout(pb));
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa.vars()[i].value().storage(), pb.vars()[i].value().storage()) << pa.names()[i];
    differs |= pa.vars()[i].value().storage() != pc.vars()[i].value().storage();
  }
  EXPECT_TRUE(differs);
}

TEST(Ema, HandValueAndFixedPoint) {
  ParamSet<double> s;
  s.add("w", Tensor<double>({2}, std::vector<double>{1.0, 3.0}), true);
  auto pair = StudentTeacherPair<double>::from_student(s, 0.99);
  pair.teacher.vars()[0].ptr()->value = Tensor<double>({2}, std::vector<double>{0.5, 3.0});
  ema_update(pair);
  // 0.99 * 0.5 + 0.01 * 1.0 = 0.505; equal entries stay put.
  EXPECT_NEAR(pair.teacher.vars()[0].value()[0], 0.505, 1e-15);
  EXPECT_NEAR(pair.teacher.vars()[0].value()[1], 3.0, 1e-15);

  ParamSet<double> s2;
  s2.add("w", Tensor<double>({1}, 1.0), true);
  auto p2 = StudentTeacherPair<double>::from_student(s2, 0.5);
  p2.teacher.vars()[0].ptr()->value[0] = 0.02;
  ema_update(p2);
  EXPECT_NEAR(p2.teacher.vars()[0].value()[0], 0.51, 1e-15);

  ParamSet<double> s3;
  s3.add("w", Tensor<double>({1}, 1.5), true);
  auto p3 = StudentTeacherPair<double>::from_student(s3, 0.99);
  p3.teacher.vars()[0].ptr()->value[0] = 0.5;
  ema_update(p3);
  EXPECT_NEAR(p3.teacher.vars()[0].value()[0], 0.51, 1e-15);
}

TEST(Ema, EqualTeacherIsBitwiseFixedPoint) {
  const auto spec = tiny_spec();
  Rng rng(9);
  auto pair = StudentTeacherPair<double>::from_student(init_params<double>(spec, rng), 0.99);
  for (int k = 0; k < 3; ++k) ema_update(pair);
  for (std::size_t i = 0; i < pair.student.size(); ++i)
    EXPECT_EQ(pair.teacher.vars()[i].value().storage(), pair.student.vars()[i].value().storage());
}

TEST(Ema, ZeroMomentumCopiesAndUpdateIsLinear) {
  const auto spec = tiny_spec();
  Rng rng(7);
  auto student = init_params<double>(spec, rng);
  auto pair = StudentTeacherPair<double>::from_student(student, 0.0);
  for (auto v : pair.teacher.vars()) v.mutable_value().fill(0.3);
  ema_update(pair);
  for (std::size_t i = 0; i < pair.student.size(); ++i)
    EXPECT_EQ(pair.teacher.vars()[i].value().storage(), pair.student.vars()[i].value().storage());

  // EMA of a sum of teachers equals the sum of their EMAs.
  pair.momentum = 0.9;
  Rng r2(8);
  auto t1 = init_params<double>(spec, r2);
  auto t2 = init_params<double>(spec, r2);
  auto run = [&](const ParamSet<double>& t) {
    auto p = pair;
    p.teacher = t.clone(false);
    ema_update(p);
    return p.teacher;
  };
  ParamSet<double> sum = t1.clone(false);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    auto v = sum.vars()[i];
    for (std::size_t j = 0; j < v.size(); ++j) v.mutable_value()[j] += t2.vars()[i].value()[j];
  }
  // ema(t1) + ema(t2) = ema(t1 + t2) + (1 - t) * student.
  const auto a = run(t1), b = run(t2), c = run(sum);
  for (std::size_t i = 0; i < sum.size(); ++i)
    for (std::size_t j = 0; j < sum.vars()[i].size(); ++j)
      EXPECT_NEAR(a.vars()[i].value()[j] + b.vars()[i].value()[j],
                  c.vars()[i].value()[j] + 0.1 * pair.student.vars()[i].value()[j], 1e-12);
}

TEST(Ema, RejectsBadMomentumAndLayout) {
  ParamSet<double> s;
  s.add("w", Tensor<double>({1}, 1.0), true);
  auto pair = StudentTeacherPair<double>::from_student(s, 1.0);
  EXPECT_THROW(ema_update(pair), std::invalid_argument);
  pair.momentum = 0.5;
  pair.teacher = ParamSet<double>{};
  EXPECT_THROW(ema_update(pair), std::invalid_argument);
}
