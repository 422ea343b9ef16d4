#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "anc/errors.hpp"
#include "anc/features.hpp"
#include "anc/rng.hpp"
#include "anc/tns_io.hpp"

namespace anc {

/// One training or evaluation pair: normalized feature maps plus keypoints.
struct TrainPair {
  FeatureMap source;
  FeatureMap target;
  PairAnnotation annotation;
};

using Dataset = std::vector<TrainPair>;

struct SynthDatasetOptions {
  std::size_t n_pairs = 10;
  std::size_t grid = 16;
  std::size_t depth = 32;
  double noise_std = 0.0;
  int max_translation = 4;
  double flip_prob = 0.5;
  /// Probability of a 2x up or down scale (each half of it).
  double scale_prob = 0.0;
  std::size_t n_keypoints = 10;
  int stride = kDefaultStride;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_pairs == 0) throw InvalidArgument("n_pairs must be >= 1");
    if (grid == 0 || depth == 0) throw InvalidArgument("grid and depth must be >= 1");
    if (max_translation < 0) throw InvalidArgument("max_translation must be >= 0");
    if (flip_prob < 0.0 || flip_prob > 1.0 || scale_prob < 0.0 || scale_prob > 1.0)
      throw InvalidArgument("probabilities must lie in [0, 1]");
    if (noise_std < 0.0) throw InvalidArgument("noise_std must be >= 0");
    if (stride < 1) throw InvalidArgument("stride must be >= 1");
  }
};

/// Pair i depends only on (seed, i).
inline SyntheticPair synth_dataset_pair(const SynthDatasetOptions& o, std::size_t i) {
  Rng rng = Rng(o.seed, 0x73796e7468ULL).split(i);
  GridTransform t;
  const auto span = static_cast<std::uint64_t>(2 * o.max_translation + 1);
  t.dy = static_cast<int>(rng.below(span)) - o.max_translation;
  t.dx = static_cast<int>(rng.below(span)) - o.max_translation;
  t.flip_x = rng.uniform() < o.flip_prob;
  const double s = rng.uniform();
  if (s < o.scale_prob / 2)
    t.scale = GridTransform::Scale::up2;
  else if (s < o.scale_prob)
    t.scale = GridTransform::Scale::down2;
  SynthOptions so;
  so.height = so.width = o.grid;
  so.depth = o.depth;
  so.transform = t;
  so.n_keypoints = o.n_keypoints;
  so.noise_std = o.noise_std;
  so.stride = o.stride;
  return synth_pair(rng, so);
}

inline Dataset synth_dataset(const SynthDatasetOptions& o) {
  o.validate();
  Dataset d;
  for (std::size_t i = 0; i < o.n_pairs; ++i) {
    SyntheticPair p = synth_dataset_pair(o, i);
    PairAnnotation a = p.annotation();
    d.push_back({std::move(p.source), std::move(p.target), std::move(a)});
  }
  return d;
}

inline nlohmann::json synth_options_json(const SynthDatasetOptions& o) {
  return {{"n_pairs", o.n_pairs},     {"grid", o.grid},
          {"depth", o.depth},         {"noise_std", o.noise_std},
          {"max_translation", o.max_translation}, {"flip_prob", o.flip_prob},
          {"scale_prob", o.scale_prob}, {"n_keypoints", o.n_keypoints},
          {"stride", o.stride},       {"seed", o.seed}};
}

/// Writes pair_NNNN_s.tns / pair_NNNN_t.tns, pairs.json and manifest.json.
inline void write_synth_dataset(const std::filesystem::path& dir, const SynthDatasetOptions& o) {
  o.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory", dir.string());
  std::vector<PairAnnotation> anns;
  nlohmann::json transforms = nlohmann::json::array();
  for (std::size_t i = 0; i < o.n_pairs; ++i) {
    const SyntheticPair p = synth_dataset_pair(o, i);
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%04zu", i);
    const std::string fs = std::string(stem) + "_s.tns", ft = std::string(stem) + "_t.tns";
    tns_write(p.source.values, dir / fs);
    tns_write(p.target.values, dir / ft);
    PairAnnotation a = p.annotation();
    a.source.features = fs;
    a.target.features = ft;
    anns.push_back(std::move(a));
    transforms.push_back(p.transform.describe());
  }
  write_annotations(anns, dir / "pairs.json");
  const nlohmann::json manifest{{"schema_version", 1},
                                {"kind", "anc-synthetic-dataset"},
                                {"pairs", o.n_pairs},
                                {"annotations", "pairs.json"},
                                {"options", synth_options_json(o)},
                                {"transforms", transforms}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot open for writing", (dir / "manifest.json").string());
  os << manifest.dump(1) << '\n';
  if (!os) throw IoError("write failed", (dir / "manifest.json").string());
}

/// Loads a dataset directory (or an annotation file whose images name their
/// feature files relative to it).
inline Dataset load_dataset(const std::filesystem::path& where, int stride = kDefaultStride) {
  const std::filesystem::path file = std::filesystem::is_directory(where) ? where / "pairs.json" : where;
  const std::filesystem::path base = file.parent_path();
  Dataset d;
  std::size_t i = 0;
  for (auto& a : read_annotations(file)) {
    if (a.source.features.empty() || a.target.features.empty())
      throw FormatError("pair " + std::to_string(i) + " in " + file.string() + " names no feature files");
    auto [fs, ft] = load_feature_pair(base / a.source.features, base / a.target.features, stride);
    d.push_back({std::move(fs), std::move(ft), std::move(a)});
    ++i;
  }
  if (d.empty()) throw InvalidArgument("dataset " + file.string() + " is empty");
  return d;
}

}  // namespace anc
