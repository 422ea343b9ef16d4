#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "anc/conv4d.hpp"
#include "anc/dataset.hpp"
#include "anc/errors.hpp"
#include "anc/matching.hpp"
#include "anc/model.hpp"

namespace anc {

enum class PckReference { image, bounding_box };

inline const char* reference_name(PckReference r) { return r == PckReference::image ? "image" : "bounding_box"; }

inline PckReference parse_reference(const std::string& s) {
  if (s == "image") return PckReference::image;
  if (s == "bounding_box" || s == "bbox") return PckReference::bounding_box;
  throw InvalidArgument("unknown PCK reference '" + s + "' (expected image or bounding_box)");
}

struct PckConfig {
  double alpha = 0.1;
  PckReference reference = PckReference::image;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("PCK alpha must lie in (0, 1]");
  }
};

/// Fraction of keypoints whose error is <= alpha * max(w_r, h_r).
inline double pck(const std::vector<Keypoint>& predicted, const std::vector<Keypoint>& truth, double w_r,
                  double h_r, const PckConfig& cfg) {
  cfg.validate();
  if (predicted.size() != truth.size())
    throw InvalidArgument("PCK: " + std::to_string(predicted.size()) + " predictions for " +
                          std::to_string(truth.size()) + " ground-truth keypoints");
  if (truth.empty()) throw InvalidArgument("PCK needs at least one keypoint");
  const double thr = cfg.alpha * std::max(w_r, h_r);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (std::hypot(predicted[i].x - truth[i].x, predicted[i].y - truth[i].y) <= thr) ++ok;
  return static_cast<double>(ok) / static_cast<double>(truth.size());
}

/// Reference extent of the target image: its size, or its bounding box
/// when one is annotated (the full image otherwise).
inline std::array<double, 2> reference_extent(const ImageAnnotation& img, PckReference ref) {
  if (ref == PckReference::bounding_box && img.bbox) {
    const auto& b = *img.bbox;
    return {b[2] - b[0], b[3] - b[1]};
  }
  return {static_cast<double>(img.width), static_cast<double>(img.height)};
}

/// Each source keypoint predicted at the same relative position in the
/// target image (pixel-center convention).
inline std::vector<Keypoint> identity_predictions(const PairAnnotation& p) {
  const double sx = static_cast<double>(p.target.width) / p.source.width;
  const double sy = static_cast<double>(p.target.height) / p.source.height;
  std::vector<Keypoint> out;
  for (const auto& k : p.source.keypoints) out.push_back({(k.x + 0.5) * sx - 0.5, (k.y + 0.5) * sy - 0.5});
  return out;
}

inline double identity_baseline(const std::vector<PairAnnotation>& pairs, const PckConfig& cfg) {
  if (pairs.empty()) throw InvalidArgument("no pairs to evaluate");
  double s = 0.0;
  for (const auto& p : pairs) {
    const auto ext = reference_extent(p.target, cfg.reference);
    s += pck(identity_predictions(p), p.target.keypoints, ext[0], ext[1], cfg);
  }
  return s / static_cast<double>(pairs.size());
}

inline double identity_baseline(const std::filesystem::path& annotations, const PckConfig& cfg) {
  return identity_baseline(read_annotations(annotations), cfg);
}

struct EvalReport {
  double pck = 0.0;
  double alpha = 0.1;
  PckReference reference = PckReference::image;
  std::size_t pairs = 0;

  nlohmann::json to_json() const {
    return {{"schema_version", 1}, {"pck", pck}, {"alpha", alpha}, {"reference", reference_name(reference)}, {"pairs", pairs}};
  }
};

/// Model predictions for the source keypoints of one pair.
inline std::vector<Keypoint> predict_keypoints(const ProbabilityMap4D& v, const PairAnnotation& ann, int stride) {
  std::vector<Keypoint> out;
  for (const auto& k : ann.source.keypoints) out.push_back(match_keypoint(v, k, stride).target_px);
  return out;
}

/// Mean per-pair PCK of the model (or of the raw feature correlation when
/// model is null).
inline EvalReport evaluate_pck(const Dataset& data, const Model* model, int stride, const PckConfig& cfg) {
  if (data.empty()) throw InvalidArgument("dataset is empty");
  cfg.validate();
  double s = 0.0;
  for (const auto& p : data) {
    const ProbabilityMap4D v = model ? predict_probabilities(*model, p.source, p.target) : raw_probabilities(p.source, p.target);
    const auto ext = reference_extent(p.annotation.target, cfg.reference);
    s += pck(predict_keypoints(v, p.annotation, stride), p.annotation.target.keypoints, ext[0], ext[1], cfg);
  }
  return {s / static_cast<double>(data.size()), cfg.alpha, cfg.reference, data.size()};
}

// ---------------------------------------------------------------------------
// conv4d benchmark

struct BenchCase {
  std::size_t size = 8;  // all four extents
  std::size_t channels = 4;
  KernelShape kernel = KernelShape::isotropic(5);
};

struct BenchRow {
  BenchCase config;
  double naive_ms = 0.0, fast_ms = 0.0, fft_ms = 0.0;
  double max_abs_diff_fast = 0.0, max_abs_diff_fft = 0.0;
  double speedup_fast() const { return naive_ms / fast_ms; }
  double speedup_fft() const { return naive_ms / fft_ms; }
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
double time_ms(Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

/// Median-of-repetitions timings of the three evaluation paths, with the
/// max abs difference of each fast path against the naive loop.
inline std::vector<BenchRow> bench_conv4d(const std::vector<BenchCase>& cases, int repetitions, std::uint64_t seed = 0) {
  if (repetitions < 3) throw InvalidArgument("benchmark needs >= 3 repetitions");
  std::vector<BenchRow> rows;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const BenchCase& c = cases[ci];
    Rng rng = Rng(seed, 0x62656e6368ULL).split(ci);
    const DenseTensor x = rng_fill(rng, Shape{c.channels, c.size, c.size, c.size, c.size}, Normal{0.0, 1.0});
    const Kernel4D k = Kernel4D::random(c.kernel, c.channels, c.channels, rng);
    BenchRow r;
    r.config = c;
    DenseTensor ref, fast, spec;
    std::vector<double> tn, tf, ts;
    for (int i = 0; i < repetitions; ++i) {
      tn.push_back(time_ms([&] { ref = conv4d_naive(x, k); }));
      tf.push_back(time_ms([&] { fast = conv4d_fast(x, k); }));
      ts.push_back(time_ms([&] { spec = conv4d_fft(x, k); }));
    }
    r.naive_ms = median(tn);
    r.fast_ms = median(tf);
    r.fft_ms = median(ts);
    r.max_abs_diff_fast = max_abs_diff(ref, fast);
    r.max_abs_diff_fft = max_abs_diff(ref, spec);
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json bench_to_json(const std::vector<BenchRow>& rows) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : rows)
    list.push_back({{"size", r.config.size},
                    {"channels", r.config.channels},
                    {"kernel", r.config.kernel.str()},
                    {"naive_ms", r.naive_ms},
                    {"fast_ms", r.fast_ms},
                    {"fft_ms", r.fft_ms},
                    {"speedup_fast", r.speedup_fast()},
                    {"speedup_fft", r.speedup_fft()},
                    {"max_abs_diff_fast", r.max_abs_diff_fast},
                    {"max_abs_diff_fft", r.max_abs_diff_fft}});
  return {{"schema_version", 1}, {"results", list}};
}

}  // namespace anc
