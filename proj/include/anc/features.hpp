#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anc/autodiff.hpp"
#include "anc/errors.hpp"
#include "anc/parallel.hpp"
#include "anc/rng.hpp"
#include "anc/tensor.hpp"
#include "anc/tns_io.hpp"

namespace anc {

inline constexpr int kDefaultStride = 16;

/// h x w grid of d-dimensional descriptors; values has dims (h, w, d).
struct FeatureMap {
  DenseTensor values;
  int stride = kDefaultStride;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t depth() const { return values.dim(2); }
};

// ---------------------------------------------------------------------------
// Grid <-> pixel mapping. Cell centers land on pixel centers.

inline double to_pixel(double grid_pos, int stride) {
  if (stride < 1) throw InvalidArgument("stride must be >= 1");
  return (grid_pos + 0.5) * stride - 0.5;
}

inline double to_grid(double pixel, int stride) {
  if (stride < 1) throw InvalidArgument("stride must be >= 1");
  return (pixel + 0.5) / stride - 0.5;
}

// ---------------------------------------------------------------------------
// Normalization and correlation

/// Unit L2 norm per cell over the last axis; all-zero cells stay zero.
inline DenseTensor l2_normalize_cells(const DenseTensor& x) {
  if (x.rank() != 3) throw InvalidArgument("expected a rank-3 (h, w, d) map");
  if (!all_finite(x.data())) throw NumericError("feature map contains non-finite values");
  DenseTensor out = x;
  const std::size_t d = x.dim(2);
  const std::size_t cells = x.size() / d;
  auto v = out.data();
  for (std::size_t c = 0; c < cells; ++c) {
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += v[c * d + k] * v[c * d + k];
    if (ss == 0.0) continue;
    const double norm = std::sqrt(ss);
    for (std::size_t k = 0; k < d; ++k) v[c * d + k] /= norm;
  }
  return out;
}

inline FeatureMap l2_normalize(const FeatureMap& f) {
  return {l2_normalize_cells(f.values), f.stride};
}

/// c[0, i, j, k, l] = <a[i, j, :], b[k, l, :]>. Products are summed in
/// channel order, so swapping the arguments transposes the result exactly.
inline DenseTensor correlation_values(const DenseTensor& a, const DenseTensor& b) {
  if (a.rank() != 3 || b.rank() != 3) throw InvalidArgument("correlation expects (h, w, d) maps");
  if (a.dim(2) != b.dim(2))
    throw InvalidArgument("feature depth mismatch: " + std::to_string(a.dim(2)) + " vs " +
                          std::to_string(b.dim(2)));
  const std::size_t d = a.dim(2);
  const std::size_t ns = a.dim(0) * a.dim(1);
  const std::size_t nt = b.dim(0) * b.dim(1);
  DenseTensor out(Shape{1, a.dim(0), a.dim(1), b.dim(0), b.dim(1)});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  parallel_for(static_cast<std::ptrdiff_t>(ns), [&](std::ptrdiff_t p) {
    const double* fa = pa + p * d;
    for (std::size_t q = 0; q < nt; ++q) {
      const double* fb = pb + q * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += fa[k] * fb[k];
      po[p * nt + q] = s;
    }
  });
  return out;
}

inline DenseTensor correlation_map(const FeatureMap& fs, const FeatureMap& ft) {
  return correlation_values(fs.values, ft.values);
}

namespace ops {

/// Differentiable per-cell L2 normalization over the last axis of (h, w, d).
inline Variable l2_normalize_cells(Tape& tape, const Variable& x) {
  DenseTensor out = anc::l2_normalize_cells(x.value());
  if (!tape.recording({x})) return tape.record(std::move(out), {x}, {});
  const std::size_t d = x.value().dim(2);
  const std::size_t cells = x.value().size() / d;
  std::vector<double> norms(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += x.value()[c * d + k] * x.value()[c * d + k];
    norms[c] = std::sqrt(ss);
  }
  DenseTensor y = out;
  return tape.record(std::move(out), {x},
                     [x, y = std::move(y), norms = std::move(norms), d](const DenseTensor& g) {
                       auto gx = x.grad().data();
                       for (std::size_t c = 0; c < norms.size(); ++c) {
                         if (norms[c] == 0.0) continue;
                         double dot = 0.0;
                         for (std::size_t k = 0; k < d; ++k) dot += y[c * d + k] * g[c * d + k];
                         for (std::size_t k = 0; k < d; ++k)
                           gx[c * d + k] += (g[c * d + k] - y[c * d + k] * dot) / norms[c];
                       }
                     });
}

/// Differentiable 4D correlation of two (h, w, d) maps.
inline Variable correlation(Tape& tape, const Variable& a, const Variable& b) {
  DenseTensor out = correlation_values(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](const DenseTensor& g) {
    const std::size_t d = a.value().dim(2);
    const std::size_t ns = a.value().dim(0) * a.value().dim(1);
    const std::size_t nt = b.value().dim(0) * b.value().dim(1);
    const double* pg = g.data().data();
    if (a.requires_grad()) {
      double* ga = a.grad().data().data();
      const double* pb = b.value().data().data();
      parallel_for(static_cast<std::ptrdiff_t>(ns), [&](std::ptrdiff_t p) {
        for (std::size_t q = 0; q < nt; ++q) {
          const double gv = pg[p * nt + q];
          if (gv == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) ga[p * d + k] += gv * pb[q * d + k];
        }
      });
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data().data();
      const double* pa = a.value().data().data();
      parallel_for(static_cast<std::ptrdiff_t>(nt), [&](std::ptrdiff_t q) {
        for (std::size_t p = 0; p < ns; ++p) {
          const double gv = pg[p * nt + q];
          if (gv == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) gb[q * d + k] += gv * pa[p * d + k];
        }
      });
    }
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Keypoint annotations
//
// {"pairs": [{"source": {"width": W, "height": H, "keypoints": [[x, y], ...]},
//             "target": {...}}, ...]}
// Pixel coordinates: x right, y down, origin at the top-left pixel center.
// Optional per-image members: "features" (TNS path relative to the file) and
// "bbox" [x0, y0, x1, y1].

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct ImageAnnotation {
  int width = 0;
  int height = 0;
  std::vector<Keypoint> keypoints;
  std::string features;
  std::optional<std::array<double, 4>> bbox;
};

struct PairAnnotation {
  ImageAnnotation source;
  ImageAnnotation target;
};

inline nlohmann::json to_json(const ImageAnnotation& a) {
  nlohmann::json j;
  j["width"] = a.width;
  j["height"] = a.height;
  j["keypoints"] = nlohmann::json::array();
  for (const auto& k : a.keypoints) j["keypoints"].push_back({k.x, k.y});
  if (!a.features.empty()) j["features"] = a.features;
  if (a.bbox) j["bbox"] = *a.bbox;
  return j;
}

inline nlohmann::json annotations_to_json(const std::vector<PairAnnotation>& pairs) {
  nlohmann::json j;
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) j["pairs"].push_back({{"source", to_json(p.source)}, {"target", to_json(p.target)}});
  return j;
}

inline ImageAnnotation image_annotation_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("image annotation must be an object");
  ImageAnnotation a;
  if (!j.contains("width") || !j.contains("height") || !j.contains("keypoints"))
    throw FormatError("image annotation needs width, height and keypoints");
  if (!j["width"].is_number() || !j["height"].is_number())
    throw FormatError("width/height must be numbers");
  a.width = j["width"].get<int>();
  a.height = j["height"].get<int>();
  if (a.width <= 0 || a.height <= 0) throw FormatError("image size must be positive");
  if (!j["keypoints"].is_array()) throw FormatError("keypoints must be an array");
  for (const auto& k : j["keypoints"]) {
    if (!k.is_array() || k.size() != 2 || !k[0].is_number() || !k[1].is_number())
      throw FormatError("keypoint must be [x, y]");
    a.keypoints.push_back({k[0].get<double>(), k[1].get<double>()});
  }
  if (j.contains("features")) {
    if (!j["features"].is_string()) throw FormatError("features must be a string");
    a.features = j["features"].get<std::string>();
  }
  if (j.contains("bbox")) {
    const auto& b = j["bbox"];
    if (!b.is_array() || b.size() != 4) throw FormatError("bbox must be [x0, y0, x1, y1]");
    a.bbox = std::array<double, 4>{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                   b[3].get<double>()};
  }
  return a;
}

inline std::vector<PairAnnotation> annotations_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("pairs") || !j["pairs"].is_array())
    throw FormatError("annotation document needs a \"pairs\" array");
  std::vector<PairAnnotation> out;
  for (const auto& p : j["pairs"]) {
    if (!p.is_object() || !p.contains("source") || !p.contains("target"))
      throw FormatError("pair needs source and target");
    PairAnnotation pa{image_annotation_from_json(p["source"]), image_annotation_from_json(p["target"])};
    if (pa.source.keypoints.size() != pa.target.keypoints.size())
      throw FormatError("source and target keypoint counts differ");
    out.push_back(std::move(pa));
  }
  return out;
}

inline std::vector<PairAnnotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open annotations", path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed annotation JSON in " + path.string() + ": " + e.what());
  }
  try {
    return annotations_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed annotation JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_annotations(const std::vector<PairAnnotation>& pairs,
                              const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing", path.string());
  os << annotations_to_json(pairs).dump(1) << '\n';
  if (!os) throw IoError("write failed", path.string());
}

// ---------------------------------------------------------------------------
// Synthetic pairs

/// Grid transform in continuous cell coordinates (y down, x right), applied
/// as scale, then flips, then translation.
struct GridTransform {
  enum class Scale { none, up2, down2 };
  Scale scale = Scale::none;
  bool flip_x = false;
  bool flip_y = false;
  int dy = 0;
  int dx = 0;

  static GridTransform translation(int dy, int dx) { return {Scale::none, false, false, dy, dx}; }

  /// Maps a continuous cell position of the source grid onto the target grid.
  std::array<double, 2> apply(double y, double x, std::size_t h, std::size_t w) const {
    switch (scale) {
      case Scale::up2:
        y = 2.0 * y + 0.5;
        x = 2.0 * x + 0.5;
        break;
      case Scale::down2:
        y = y / 2.0;
        x = x / 2.0;
        break;
      case Scale::none:
        break;
    }
    if (flip_x) x = static_cast<double>(w - 1) - x;
    if (flip_y) y = static_cast<double>(h - 1) - y;
    return {y + dy, x + dx};
  }

  /// Source cell whose content fills target cell (k, l), if any.
  std::optional<std::array<std::ptrdiff_t, 2>> source_of(std::ptrdiff_t k, std::ptrdiff_t l,
                                                          std::size_t h, std::size_t w) const {
    std::ptrdiff_t y = k - dy, x = l - dx;
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
    if (y < 0 || y >= H || x < 0 || x >= W) return std::nullopt;
    if (flip_x) x = W - 1 - x;
    if (flip_y) y = H - 1 - y;
    switch (scale) {
      case Scale::up2:
        y /= 2;
        x /= 2;
        break;
      case Scale::down2:
        y *= 2;
        x *= 2;
        break;
      case Scale::none:
        break;
    }
    if (y < 0 || y >= H || x < 0 || x >= W) return std::nullopt;
    return std::array<std::ptrdiff_t, 2>{y, x};
  }

  std::string describe() const {
    std::string s = "translate(" + std::to_string(dy) + "," + std::to_string(dx) + ")";
    if (flip_x) s += "+flip_x";
    if (flip_y) s += "+flip_y";
    if (scale == Scale::up2) s += "+up2";
    if (scale == Scale::down2) s += "+down2";
    return s;
  }
};

struct KeypointPair {
  Keypoint source;
  Keypoint target;
};

struct SyntheticPair {
  FeatureMap source;
  FeatureMap target;
  std::vector<KeypointPair> keypoints;
  GridTransform transform;

  PairAnnotation annotation() const {
    PairAnnotation a;
    a.source.width = static_cast<int>(source.width()) * source.stride;
    a.source.height = static_cast<int>(source.height()) * source.stride;
    a.target.width = static_cast<int>(target.width()) * target.stride;
    a.target.height = static_cast<int>(target.height()) * target.stride;
    for (const auto& kp : keypoints) {
      a.source.keypoints.push_back(kp.source);
      a.target.keypoints.push_back(kp.target);
    }
    return a;
  }
};

struct SynthOptions {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t depth = 32;
  GridTransform transform;
  std::size_t n_keypoints = 10;
  double noise_std = 0.0;
  int stride = kDefaultStride;
};

/// Random normalized source cells; the target is the transformed grid (fresh
/// cells where nothing maps in) plus i.i.d. noise, renormalized. Keypoints
/// sit at source cell centers whose image stays inside the target grid.
inline SyntheticPair synth_pair(Rng& rng, const SynthOptions& o) {
  if (o.height == 0 || o.width == 0 || o.depth == 0) throw InvalidArgument("empty grid");
  if (o.n_keypoints > o.height * o.width) throw InvalidArgument("more keypoints than cells");
  if (o.noise_std < 0.0) throw InvalidArgument("noise_std must be >= 0");
  const std::size_t h = o.height, w = o.width, d = o.depth;

  DenseTensor src = l2_normalize_cells(rng_fill(rng, Shape{h, w, d}, Normal{0.0, 1.0}));
  DenseTensor fresh = l2_normalize_cells(rng_fill(rng, Shape{h, w, d}, Normal{0.0, 1.0}));
  DenseTensor tgt(Shape{h, w, d});
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t l = 0; l < w; ++l) {
      const auto s = o.transform.source_of(static_cast<std::ptrdiff_t>(k),
                                           static_cast<std::ptrdiff_t>(l), h, w);
      for (std::size_t c = 0; c < d; ++c)
        tgt.at(k, l, c) = s ? src.at((*s)[0], (*s)[1], c) : fresh.at(k, l, c);
    }
  if (o.noise_std > 0.0) {
    const DenseTensor noise = rng_fill(rng, Shape{h, w, d}, Normal{0.0, o.noise_std});
    accumulate(tgt, noise.data());
    tgt = l2_normalize_cells(tgt);
  }

  std::vector<std::array<std::size_t, 2>> valid;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const auto p = o.transform.apply(static_cast<double>(i), static_cast<double>(j), h, w);
      if (p[0] >= 0.0 && p[0] <= static_cast<double>(h - 1) && p[1] >= 0.0 &&
          p[1] <= static_cast<double>(w - 1))
        valid.push_back({i, j});
    }
  if (valid.empty())
    throw GenerationError("transform " + o.transform.describe() + " moves every cell out of bounds");
  const std::size_t n = std::min(o.n_keypoints, valid.size());
  for (std::size_t i = 0; i < n; ++i) std::swap(valid[i], valid[i + rng.below(valid.size() - i)]);

  SyntheticPair pair{{std::move(src), o.stride}, {std::move(tgt), o.stride}, {}, o.transform};
  for (std::size_t i = 0; i < n; ++i) {
    const auto [y, x] = valid[i];
    const auto p = o.transform.apply(static_cast<double>(y), static_cast<double>(x), h, w);
    pair.keypoints.push_back({{to_pixel(static_cast<double>(x), o.stride), to_pixel(static_cast<double>(y), o.stride)},
                              {to_pixel(p[1], o.stride), to_pixel(p[0], o.stride)}});
  }
  return pair;
}

inline std::pair<FeatureMap, FeatureMap> load_feature_pair(const std::filesystem::path& path_s,
                                                           const std::filesystem::path& path_t,
                                                           int stride = kDefaultStride) {
  DenseTensor s = tns_read(path_s);
  DenseTensor t = tns_read(path_t);
  if (s.rank() != 3) throw FormatError("feature file must be rank 3: " + path_s.string());
  if (t.rank() != 3) throw FormatError("feature file must be rank 3: " + path_t.string());
  if (s.dim(2) != t.dim(2)) throw InvalidArgument("feature depth mismatch between pair files");
  return {{l2_normalize_cells(s.as(DType::f64)), stride}, {l2_normalize_cells(t.as(DType::f64)), stride}};
}

}  // namespace anc
