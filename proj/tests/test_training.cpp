#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "anc/dataset.hpp"
#include "anc/training.hpp"
#include "temp_dir.hpp"

using namespace anc;

namespace {

std::vector<NamedParam> one_param(double value) {
  return {{"p", Variable(DenseTensor(Shape{1}, {value}), true)}};
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.selfsim = SelfSimConfig::with_window(3);
  mc.anc.channels = {1, 2, 2, 1};
  return mc;
}

Dataset small_dataset(std::size_t n, std::uint64_t seed) {
  SynthDatasetOptions o;
  o.n_pairs = n;
  o.grid = 6;
  o.depth = 8;
  o.max_translation = 1;
  o.n_keypoints = 4;
  o.noise_std = 0.1;
  o.seed = seed;
  return synth_dataset(o);
}

TrainConfig short_schedule(std::uint64_t seed) {
  TrainConfig tc;
  tc.phases = {{1, 3}, {1, 0}};
  tc.seed = seed;
  return tc;
}

bool same_params(const Model& a, const Model& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(pa[i].var.value() == pb[i].var.value())) return false;
  return true;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersButCountsStep) {
  auto params = one_param(0.5);
  AdamState s = AdamState::init(params);
  params[0].var.grad();  // allocated, all zero
  adam_step(s, params);
  EXPECT_EQ(params[0].var.value()[0], 0.5);
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto params = one_param(0.0);
  AdamState s = AdamState::init(params, 0.001);
  params[0].var.grad()[0] = 1.0;
  adam_step(s, params);
  // lr * g / (|g| + eps)
  EXPECT_NEAR(params[0].var.value()[0], -0.000999999990, 1e-15);
  EXPECT_EQ(params[0].var.grad()[0], 0.0);
  params[0].var.grad()[0] = 1.0;
  adam_step(s, params);
  EXPECT_NEAR(params[0].var.value()[0], -0.00199999998, 1e-14);
}

TEST(Adam, StepDirectionFollowsGradientSign) {
  auto params = one_param(1.0);
  AdamState s = AdamState::init(params, 0.01);
  params[0].var.grad()[0] = -3.0;
  adam_step(s, params);
  EXPECT_GT(params[0].var.value()[0], 1.0);
}

TEST(Adam, NonFiniteGradientAbortsBeforeAnyUpdate) {
  auto params = one_param(0.25);
  AdamState s = AdamState::init(params);
  params[0].var.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(s, params), NumericError);
  EXPECT_EQ(params[0].var.value()[0], 0.25);
  EXPECT_EQ(s.t, 0u);
  params[0].var.grad()[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adam_step(s, params), NumericError);
}

TEST(Adam, StateMustMatchParameters) {
  auto params = one_param(0.0);
  AdamState s = AdamState::init(params);
  auto two = one_param(0.0);
  two.push_back({"q", Variable(DenseTensor(Shape{1}), true)});
  EXPECT_THROW(adam_step(s, two), InvalidArgument);
}

TEST(Schedule, KernelSwitchesAtPhaseBoundaries) {
  TrainConfig tc;
  EXPECT_EQ(tc.total_epochs(), 20u);
  EXPECT_EQ(tc.loss_for(0).gaussian_kernel, 5);
  EXPECT_EQ(tc.loss_for(9).gaussian_kernel, 5);
  EXPECT_EQ(tc.loss_for(10).gaussian_kernel, 3);
  EXPECT_EQ(tc.loss_for(14).gaussian_kernel, 3);
  EXPECT_EQ(tc.loss_for(15).gaussian_kernel, 0);
  EXPECT_EQ(tc.loss_for(19).gaussian_kernel, 0);
  EXPECT_EQ(tc.phase_of(100), 2u);
}

TEST(Schedule, PhaseStringRoundTrips) {
  const auto ph = parse_phases("10:5,5:3,5:0");
  ASSERT_EQ(ph.size(), 3u);
  EXPECT_EQ(ph[1], (Phase{5, 3}));
  EXPECT_EQ(phases_to_string(ph), "10:5,5:3,5:0");
  EXPECT_THROW(parse_phases("10"), InvalidArgument);
  EXPECT_THROW(parse_phases("a:b"), InvalidArgument);
  TrainConfig tc;
  tc.phases = {{2, 4}};
  EXPECT_THROW(tc.validate(), InvalidArgument);
}

TEST(Schedule, EpochOrderIsAPermutationFixedBySeedAndEpoch) {
  const auto a = epoch_order(50, 3, 1);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(a, epoch_order(50, 3, 1));
  EXPECT_NE(a, epoch_order(50, 3, 2));
  EXPECT_NE(a, epoch_order(50, 4, 1));
}

TEST(Training, EmptyDatasetIsRejected) {
  Rng rng(0);
  Model m = Model::init(small_model(), rng);
  TrainConfig tc;
  AdamState s = AdamState::init(m.parameters());
  EXPECT_THROW(train_epoch(Dataset{}, m, tc, s, 0), InvalidArgument);
}

TEST(Training, KeypointLossFallsOnIdentityPair) {
  Rng data_rng(4);
  SynthOptions so;  // identity transform, no noise
  so.height = so.width = 6;
  so.depth = 8;
  so.n_keypoints = 5;
  const SyntheticPair sp = synth_pair(data_rng, so);
  const Dataset data{{sp.source, sp.target, sp.annotation()}};

  Rng rng(0, 0x696e6974);
  Model m = Model::init(small_model(), rng);
  const TrainConfig tc;
  AdamState s = AdamState::init(m.parameters(), tc.lr);
  // scored against the last phase's target, the one training ends on
  const LossConfig last = tc.loss_for(tc.total_epochs() - 1);
  const double before = evaluate_losses(data, m, last, tc.stride).first;
  std::vector<double> lk;
  train(data, m, tc, s, 0, [&](const EpochReport& r) { lk.push_back(r.mean_lk); });
  ASSERT_EQ(lk.size(), 20u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(lk[e], lk[e - 1]) << "epoch " << e;
  const double after = evaluate_losses(data, m, last, tc.stride).first;
  EXPECT_LT(after, before);
}

TEST(Training, SameSeedGivesIdenticalRuns) {
  const Dataset data = small_dataset(6, 2);
  const TrainConfig tc = short_schedule(5);
  auto run = [&] {
    Rng rng(1, 0x696e6974);
    Model m = Model::init(small_model(), rng);
    AdamState s = AdamState::init(m.parameters());
    std::vector<EpochReport> reports;
    train(data, m, tc, s, 0, [&](const EpochReport& r) { reports.push_back(r); });
    return std::pair{m, reports};
  };
  const auto [m1, r1] = run();
  const auto [m2, r2] = run();
  ASSERT_EQ(r1.size(), 2u);
  EXPECT_EQ(r1[0].gaussian_kernel, 3);
  EXPECT_EQ(r1[1].gaussian_kernel, 0);
  for (std::size_t e = 0; e < r1.size(); ++e) {
    EXPECT_EQ(r1[e].mean_lk, r2[e].mean_lk);
    EXPECT_EQ(r1[e].mean_lo, r2[e].mean_lo);
  }
  EXPECT_TRUE(same_params(m1, m2));
}

TEST(Checkpoint, RoundTripsParametersAndOptimizer) {
  TempDir dir;
  const Dataset data = small_dataset(3, 7);
  const TrainConfig tc = short_schedule(1);
  Rng rng(2);
  Model m = Model::init(small_model(), rng);
  AdamState s = AdamState::init(m.parameters());
  train_epoch(data, m, tc, s, 0);
  checkpoint_save(dir.path, m, s, tc, 1);
  const Checkpoint c = checkpoint_load(dir.path);
  EXPECT_EQ(c.next_epoch, 1u);
  EXPECT_EQ(c.adam.t, s.t);
  EXPECT_EQ(c.train.phases, tc.phases);
  EXPECT_TRUE(same_params(m, c.model));
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    EXPECT_EQ(c.adam.m[i], s.m[i]);
    EXPECT_EQ(c.adam.v[i], s.v[i]);
  }
}

TEST(Checkpoint, ResumedRunMatchesUninterruptedRun) {
  TempDir dir;
  const Dataset data = small_dataset(4, 3);
  const TrainConfig tc = short_schedule(9);
  auto fresh = [] {
    Rng rng(3, 0x696e6974);
    return Model::init(small_model(), rng);
  };

  Model full = fresh();
  AdamState sf = AdamState::init(full.parameters());
  train(data, full, tc, sf, 0);

  Model part = fresh();
  AdamState sp = AdamState::init(part.parameters());
  train_epoch(data, part, tc, sp, 0);
  checkpoint_save(dir.path, part, sp, tc, 1);
  Checkpoint c = checkpoint_load(dir.path);
  train(data, c.model, c.train, c.adam, c.next_epoch);

  EXPECT_TRUE(same_params(full, c.model));
  EXPECT_EQ(sf.t, c.adam.t);
}

TEST(Checkpoint, MissingTensorFileIsAFormatError) {
  TempDir dir;
  Rng rng(0);
  Model m = Model::init(small_model(), rng);
  AdamState s = AdamState::init(m.parameters());
  checkpoint_save(dir.path, m, s, TrainConfig{}, 0);
  std::filesystem::remove(dir.path / "anc.l0.b0.w.tns");
  EXPECT_THROW(checkpoint_load(dir.path), FormatError);
}

TEST(Checkpoint, VersionMismatchIsAFormatError) {
  TempDir dir;
  Rng rng(0);
  Model m = Model::init(small_model(), rng);
  AdamState s = AdamState::init(m.parameters());
  checkpoint_save(dir.path, m, s, TrainConfig{}, 0);
  std::ifstream is(dir.path / "manifest.json");
  nlohmann::json j = nlohmann::json::parse(is);
  is.close();
  j["version"] = 99;
  std::ofstream(dir.path / "manifest.json") << j.dump();
  EXPECT_THROW(checkpoint_load(dir.path), FormatError);
}

TEST(Checkpoint, EditedConfigFailsHashCheck) {
  TempDir dir;
  Rng rng(0);
  Model m = Model::init(small_model(), rng);
  AdamState s = AdamState::init(m.parameters());
  checkpoint_save(dir.path, m, s, TrainConfig{}, 0);
  std::ifstream is(dir.path / "manifest.json");
  nlohmann::json j = nlohmann::json::parse(is);
  is.close();
  j["train"]["lr"] = 0.5;
  std::ofstream(dir.path / "manifest.json") << j.dump();
  EXPECT_THROW(checkpoint_load(dir.path), FormatError);
}

TEST(Checkpoint, MissingManifestIsAnIoError) {
  TempDir dir;
  EXPECT_THROW(checkpoint_load(dir.path), IoError);
}
