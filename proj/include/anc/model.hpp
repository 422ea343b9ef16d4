#pragma once

#include <string>
#include <vector>

#include "anc/autodiff.hpp"
#include "anc/conv4d.hpp"
#include "anc/features.hpp"
#include "anc/losses.hpp"
#include "anc/matching.hpp"
#include "anc/self_similarity.hpp"

namespace anc {

struct ModelConfig {
  SelfSimConfig selfsim;
  AncConfig anc;

  void validate() const {
    selfsim.validate();
    anc.validate();
  }
};

/// Learnable parts of the pipeline: the self-similarity convolutions and
/// the consensus kernels. The feature provider is fixed.
struct Model {
  ModelConfig config;
  SelfSimParams selfsim;
  AncParams anc;
  Conv4dAlgo algo = Conv4dAlgo::fft;

  static Model init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.selfsim = SelfSimParams::init(cfg.selfsim, rng);
    m.anc = AncParams::init(cfg.anc, rng);
    return m;
  }

  std::vector<NamedParam> parameters() const {
    auto p = selfsim.parameters();
    for (auto& a : anc.parameters()) p.push_back(std::move(a));
    return p;
  }
};

struct ForwardResult {
  Variable cs;     // correlation of the self-similarity maps
  Variable cf;     // correlation of the features
  Variable c_bar;  // bidirectionally refined map
  Variable c_hat;  // after soft mutual nearest-neighbour filtering
};

inline ForwardResult model_forward(Tape& tape, const Model& m, const FeatureMap& fs, const FeatureMap& ft) {
  if (fs.depth() != ft.depth()) throw InvalidArgument("feature depth mismatch between source and target");
  ForwardResult r;
  const Variable ss = multiscale_forward(tape, fs, m.config.selfsim, m.selfsim);
  const Variable st = multiscale_forward(tape, ft, m.config.selfsim, m.selfsim);
  r.cs = ops::correlation(tape, ss, st);
  r.cf = Variable(correlation_map(fs, ft));
  r.c_bar = bidirectional_refine(tape, r.cs, r.cf, m.config.anc, m.anc, m.algo);
  r.c_hat = ops::mutual_nn_filter(tape, r.c_bar);
  return r;
}

struct PairLoss {
  Variable lk, lo, total;
};

inline PairLoss pair_loss(Tape& tape, const Variable& c_hat, const PairAnnotation& ann, int stride,
                          const LossConfig& cfg) {
  const MatchMatrices mm = build_match_matrices(tape, ann, c_hat, stride, cfg);
  PairLoss l;
  l.lk = ops::loss_keypoint(tape, mm);
  l.lo = ops::loss_orthogonal(tape, mm);
  l.total = ops::loss_total(tape, l.lk, l.lo, cfg);
  return l;
}

/// Source-to-target probabilities of a pair under the model, without
/// recording gradients.
inline ProbabilityMap4D predict_probabilities(const Model& m, const FeatureMap& fs, const FeatureMap& ft) {
  Tape tape(false);
  return softmax_probabilities(model_forward(tape, m, fs, ft).c_hat.value(), Direction::source_to_target);
}

/// Same map from the raw feature correlation alone (no learned stages).
inline ProbabilityMap4D raw_probabilities(const FeatureMap& fs, const FeatureMap& ft) {
  return softmax_probabilities(mutual_nn_filter(correlation_map(fs, ft)), Direction::source_to_target);
}

}  // namespace anc
