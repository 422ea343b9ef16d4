#include <gtest/gtest.h>

#include <cmath>

#include "anc/self_similarity.hpp"

using namespace anc;

namespace {

DenseTensor unit_map(Rng& rng, std::size_t h, std::size_t w, std::size_t d) {
  return l2_normalize_cells(rng_fill(rng, Shape{h, w, d}, Normal{}));
}

DenseTensor conv2d_oracle(const DenseTensor& x, const DenseTensor& k, const DenseTensor& b) {
  const auto h = static_cast<long>(x.dim(0)), w = static_cast<long>(x.dim(1));
  const std::size_t ci = x.dim(2), co = k.dim(3);
  const long r = static_cast<long>(k.dim(0)) / 2;
  DenseTensor out(Shape{x.dim(0), x.dim(1), co});
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        double s = b[o];
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            if (i + dy < 0 || i + dy >= h || j + dx < 0 || j + dx >= w) continue;
            for (std::size_t c = 0; c < ci; ++c) s += x.at(i + dy, j + dx, c) * k.at(dy + r, dx + r, c, o);
          }
        out.at(i, j, o) = s;
      }
  return out;
}

}  // namespace

TEST(SelfSimBase, SingleCellWindowThree) {
  const auto s = self_sim_base(DenseTensor(Shape{1, 1, 2}, {0.6, 0.8}), 3);
  ASSERT_EQ(s.shape(), (Shape{1, 1, 9}));
  for (std::size_t c = 0; c < 9; ++c) EXPECT_NEAR(s[c], c == 4 ? 1.0 : 0.0, 1e-15);
}

TEST(SelfSimBase, ConstantMapInteriorIsAllOnes) {
  DenseTensor f(Shape{3, 3, 2});
  for (std::size_t i = 0; i < 9; ++i) {
    f[2 * i] = 0.6;
    f[2 * i + 1] = 0.8;
  }
  const auto s = self_sim_base(f, 3);
  for (std::size_t c = 0; c < 9; ++c) EXPECT_NEAR(s.at(1, 1, c), 1.0, 1e-15);
}

TEST(SelfSimBase, MatchesDoubleLoop) {
  Rng rng(1);
  const auto f = unit_map(rng, 4, 4, 6);
  const auto s = self_sim_base(f, 5);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      int c = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx, ++c) {
          double want = 0.0;
          if (i + dy >= 0 && i + dy < 4 && j + dx >= 0 && j + dx < 4)
            for (int k = 0; k < 6; ++k) want += f.at(i, j, k) * f.at(i + dy, j + dx, k);
          EXPECT_NEAR(s.at(i, j, c), want, 1e-14);
        }
    }
}

TEST(SelfSimBase, ValuesInUnitRange) {
  Rng rng(2);
  const DenseTensor s = self_sim_base(unit_map(rng, 6, 5, 4), 5);
  for (double v : s.data()) {
    EXPECT_LE(std::abs(v), 1.0 + 1e-15);
  }
}

TEST(SelfSimBase, TranslationEquivariantOnInterior) {
  Rng rng(3);
  const auto f = unit_map(rng, 9, 9, 5);
  DenseTensor g(Shape{9, 9, 5});
  for (std::size_t i = 0; i + 1 < 9; ++i)
    for (std::size_t j = 0; j + 2 < 9; ++j)
      for (std::size_t k = 0; k < 5; ++k) g.at(i + 1, j + 2, k) = f.at(i, j, k);
  const auto sf = self_sim_base(f, 3), sg = self_sim_base(g, 3);
  // full windows stay inside both maps
  for (std::size_t i = 1; i + 3 < 9; ++i)
    for (std::size_t j = 1; j + 4 < 9; ++j)
      for (std::size_t c = 0; c < 9; ++c) EXPECT_EQ(sg.at(i + 1, j + 2, c), sf.at(i, j, c));
}

TEST(SelfSimBase, EvenWindowRejected) {
  EXPECT_THROW(self_sim_base(DenseTensor(Shape{2, 2, 2}), 4), InvalidArgument);
}

TEST(Conv2d, CenterDeltaIsIdentity) {
  Rng rng(4);
  const auto x = rng_fill(rng, Shape{5, 4, 3}, Normal{});
  DenseTensor k(Shape{3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k.at(1, 1, c, c) = 1.0;
  EXPECT_EQ(conv2d(x, k, DenseTensor(Shape{3}), false), x);
}

TEST(Conv2d, SingleCellWithRelu) {
  DenseTensor k(Shape{3, 3, 1, 1});
  k.at(1, 1, 0, 0) = 2.0;
  EXPECT_EQ(conv2d(DenseTensor(Shape{1, 1, 1}, {1.5}), k, DenseTensor(Shape{1}, {-0.5}), true)[0], 2.5);
  EXPECT_EQ(conv2d(DenseTensor(Shape{1, 1, 1}, {-1.5}), k, DenseTensor(Shape{1}, {0.5}), true)[0], 0.0);
}

TEST(Conv2d, MatchesScalarLoop) {
  Rng rng(5);
  const auto x = rng_fill(rng, Shape{5, 5, 4}, Normal{});
  const auto k = rng_fill(rng, Shape{3, 3, 4, 2}, Normal{});
  const auto b = rng_fill(rng, Shape{2}, Normal{});
  EXPECT_LE(max_abs_diff(conv2d(x, k, b, false), conv2d_oracle(x, k, b)), 1e-13);
}

TEST(Conv2d, GradientsPassFiniteDifferences) {
  Rng rng(6);
  Variable x(rng_fill(rng, Shape{5, 5, 4}, Normal{}), true);
  Variable k(rng_fill(rng, Shape{3, 3, 4, 2}, Normal{}), true);
  Variable b(rng_fill(rng, Shape{2}, Normal{}), true);
  Variable w(rng_fill(rng, Shape{5, 5, 2}, Normal{}), false);
  auto loss = [&](Tape& t) { return ops::sum(t, ops::mul(t, ops::conv2d(t, x, k, b, true), w)); };
  const auto r = grad_check(loss, {{"x", x}, {"k", k}, {"b", b}});
  EXPECT_GT(r.entries.size(), 150u);
  EXPECT_LE(r.max_rel_error(), 1e-5);
}

TEST(Multiscale, DepthForWindowFive) {
  EXPECT_EQ(SelfSimConfig::with_window(5).output_depth(), 75);
  Rng rng(7);
  const auto cfg = SelfSimConfig::with_window(5);
  const auto params = SelfSimParams::init(cfg, rng);
  Tape tape(false);
  const auto s = multiscale_forward(tape, {unit_map(rng, 4, 3, 8)}, cfg, params);
  EXPECT_EQ(s.shape(), (Shape{4, 3, 75}));
}

TEST(Multiscale, ZeroConvolutionsLeaveNormalizedBase) {
  Rng rng(8);
  const auto cfg = SelfSimConfig::with_window(3);
  SelfSimParams p = SelfSimParams::init(cfg, rng);
  for (auto& np : p.parameters()) std::fill(np.var.mutable_value().data().begin(), np.var.mutable_value().data().end(), 0.0);
  const FeatureMap f{unit_map(rng, 4, 4, 5)};
  Tape tape(false);
  const auto s = multiscale_forward(tape, f, cfg, p).value();
  const auto base = l2_normalize_cells(self_sim_base(f, 3));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t c = 0; c < 27; ++c)
        EXPECT_NEAR(s.at(i, j, c), c < 9 ? base.at(i, j, c) : 0.0, 1e-15);
}

TEST(Multiscale, KernelGradientPassesFiniteDifferences) {
  Rng rng(9);
  const auto cfg = SelfSimConfig::with_window(3);
  SelfSimParams p = SelfSimParams::init(cfg, rng);
  for (auto* b : {&p.b1, &p.b2})
    for (auto& v : b->mutable_value().data()) v = rng.uniform(-0.1, 0.1);
  const FeatureMap f{unit_map(rng, 4, 4, 6)};
  Variable target(rng_fill(rng, Shape{4, 4, 27}, Normal{0.0, 0.2}), false);
  auto loss = [&](Tape& t) {
    const auto s = multiscale_forward(t, f, cfg, p);
    const auto d = ops::add(t, s, ops::scale(t, target, -1.0));
    return ops::sum(t, ops::mul(t, d, d));
  };
  GradCheckOptions opt;
  opt.samples = 200;
  const auto r = grad_check(loss, p.parameters(), opt);
  EXPECT_EQ(r.entries.size(), 200u);
  EXPECT_LE(r.max_rel_error(), 1e-5);
}
