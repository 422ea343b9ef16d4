#include <gtest/gtest.h>

#include "anc/eval.hpp"

using namespace anc;

namespace {

ImageAnnotation image(int w, int h, std::vector<Keypoint> kps) {
  ImageAnnotation a;
  a.width = w;
  a.height = h;
  a.keypoints = std::move(kps);
  return a;
}

}  // namespace

TEST(Pck, ExactPredictionsScoreOne) {
  const std::vector<Keypoint> t{{1, 2}, {30, 40}, {99, 0}};
  EXPECT_EQ(pck(t, t, 100, 50, PckConfig{}), 1.0);
}

TEST(Pck, ErrorAtThresholdCountsAsCorrect) {
  // threshold 0.1 * max(100, 60) = 10 px
  EXPECT_EQ(pck({{10, 0}}, {{0, 0}}, 100, 60, PckConfig{}), 1.0);
  EXPECT_EQ(pck({{6, 8}}, {{0, 0}}, 60, 100, PckConfig{}), 1.0);
  EXPECT_EQ(pck({{10.001, 0}}, {{0, 0}}, 100, 60, PckConfig{}), 0.0);
}

TEST(Pck, FractionOfCorrectKeypoints) {
  const std::vector<Keypoint> truth{{0, 0}, {0, 0}, {0, 0}};
  const std::vector<Keypoint> pred{{5, 0}, {0, 15}, {50, 0}};
  EXPECT_DOUBLE_EQ(pck(pred, truth, 100, 100, PckConfig{}), 1.0 / 3.0);
}

TEST(Pck, AlphaScalesThreshold) {
  const std::vector<Keypoint> truth{{0, 0}, {0, 0}, {0, 0}};
  const std::vector<Keypoint> pred{{5, 0}, {0, 8}, {0, 15}};
  EXPECT_DOUBLE_EQ(pck(pred, truth, 100, 100, PckConfig{0.05}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(pck(pred, truth, 100, 100, PckConfig{0.1}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(pck(pred, truth, 100, 100, PckConfig{0.2}), 1.0);
}

TEST(Pck, MonotoneInAlpha) {
  Rng rng(6);
  std::vector<Keypoint> truth, pred;
  for (int i = 0; i < 40; ++i) {
    truth.push_back({rng.uniform(0, 200), rng.uniform(0, 100)});
    pred.push_back({rng.uniform(0, 200), rng.uniform(0, 100)});
  }
  double last = 0.0;
  for (double a : {0.01, 0.05, 0.1, 0.2, 0.5, 1.0}) {
    const double p = pck(pred, truth, 200, 100, PckConfig{a});
    EXPECT_GE(p, last);
    last = p;
  }
}

TEST(Pck, ScalingImageAndErrorsTogetherKeepsScore) {
  const std::vector<Keypoint> truth{{10, 10}, {20, 30}, {5, 5}};
  const std::vector<Keypoint> pred{{14, 10}, {20, 45}, {5, 12}};
  std::vector<Keypoint> t3, p3;
  for (auto k : truth) t3.push_back({3 * k.x, 3 * k.y});
  for (auto k : pred) p3.push_back({3 * k.x, 3 * k.y});
  EXPECT_EQ(pck(pred, truth, 80, 60, PckConfig{}), pck(p3, t3, 240, 180, PckConfig{}));
}

TEST(Pck, RejectsBadInput) {
  EXPECT_THROW(pck({{0, 0}}, {{0, 0}, {1, 1}}, 10, 10, PckConfig{}), InvalidArgument);
  EXPECT_THROW(pck({}, {}, 10, 10, PckConfig{}), InvalidArgument);
  EXPECT_THROW(pck({{0, 0}}, {{0, 0}}, 10, 10, PckConfig{0.0}), InvalidArgument);
  EXPECT_THROW(pck({{0, 0}}, {{0, 0}}, 10, 10, PckConfig{1.5}), InvalidArgument);
}

TEST(Pck, BoundingBoxReferenceFallsBackToImage) {
  ImageAnnotation a = image(200, 100, {});
  EXPECT_EQ(reference_extent(a, PckReference::bounding_box), (std::array<double, 2>{200, 100}));
  a.bbox = std::array<double, 4>{10, 20, 60, 50};
  EXPECT_EQ(reference_extent(a, PckReference::bounding_box), (std::array<double, 2>{50, 30}));
  EXPECT_EQ(reference_extent(a, PckReference::image), (std::array<double, 2>{200, 100}));
  EXPECT_EQ(parse_reference("bbox"), PckReference::bounding_box);
  EXPECT_THROW(parse_reference("object"), InvalidArgument);
}

TEST(IdentityBaseline, IdenticalLayoutsScoreOne) {
  const std::vector<Keypoint> k{{3, 4}, {50, 20}, {90, 70}};
  const PairAnnotation p{image(100, 80, k), image(100, 80, k)};
  EXPECT_EQ(identity_baseline({p}, PckConfig{}), 1.0);
}

TEST(IdentityBaseline, ShiftBeyondThresholdScoresZero) {
  const std::vector<Keypoint> s{{10, 10}, {40, 40}};
  const std::vector<Keypoint> t{{21, 10}, {51, 40}};
  const PairAnnotation p{image(100, 100, s), image(100, 100, t)};
  EXPECT_EQ(identity_baseline({p}, PckConfig{}), 0.0);
}

TEST(IdentityBaseline, RescalesBetweenImageSizes) {
  // pixel-center convention: (x + 0.5) * 2 - 0.5
  const PairAnnotation p{image(50, 50, {{10, 20}}), image(100, 100, {{20.5, 40.5}})};
  EXPECT_EQ(identity_predictions(p)[0].x, 20.5);
  EXPECT_EQ(identity_predictions(p)[0].y, 40.5);
  EXPECT_EQ(identity_baseline({p}, PckConfig{0.001}), 1.0);
  EXPECT_THROW(identity_baseline(std::vector<PairAnnotation>{}, PckConfig{}), InvalidArgument);
}

TEST(EvaluatePck, RawCorrelationRecoversCleanTranslation) {
  SynthDatasetOptions o;
  o.n_pairs = 4;
  o.grid = 8;
  o.depth = 16;
  o.max_translation = 2;
  o.flip_prob = 0.0;
  o.n_keypoints = 5;
  o.seed = 3;
  const Dataset d = synth_dataset(o);
  const EvalReport r = evaluate_pck(d, nullptr, kDefaultStride, PckConfig{0.1});
  EXPECT_EQ(r.pck, 1.0);
  EXPECT_EQ(r.pairs, 4u);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("schema_version"), 1);
  EXPECT_EQ(j.at("reference"), "image");
  EXPECT_THROW(evaluate_pck(Dataset{}, nullptr, kDefaultStride, PckConfig{}), InvalidArgument);
}

TEST(Bench, FastPathsAgreeWithNaive) {
  const auto rows = bench_conv4d({{6, 2, KernelShape::isotropic(3)}, {5, 1, KernelShape{3, 3, 5, 5}}}, 3);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_LE(r.max_abs_diff_fast, 1e-10);
    EXPECT_LE(r.max_abs_diff_fft, 1e-10);
    EXPECT_GT(r.naive_ms, 0.0);
  }
  const auto j = bench_to_json(rows);
  EXPECT_EQ(j.at("schema_version"), 1);
  EXPECT_EQ(j.at("results").size(), 2u);
  EXPECT_THROW(bench_conv4d({}, 2), InvalidArgument);
}
