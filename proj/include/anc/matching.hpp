#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "anc/autodiff.hpp"
#include "anc/errors.hpp"
#include "anc/features.hpp"
#include "anc/parallel.hpp"
#include "anc/tensor.hpp"

namespace anc {

namespace detail {

inline void check_corr(const DenseTensor& c, const char* what) {
  if (c.rank() != 5 || c.dim(0) != 1)
    throw InvalidArgument(std::string(what) + " expects a single-channel (1, hs, ws, ht, wt) map");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Soft mutual nearest-neighbour filtering

struct MutualMaxima {
  std::vector<double> target_max;  // per source cell (i, j): max over (k, l)
  std::vector<double> source_max;  // per target cell (k, l): max over (i, j)
  std::vector<std::size_t> target_arg, source_arg;
};

/// First-in-scan-order maxima along both matching directions.
inline MutualMaxima mutual_maxima(const DenseTensor& c) {
  const std::size_t ns = c.dim(1) * c.dim(2), nt = c.dim(3) * c.dim(4);
  MutualMaxima m;
  m.target_max.assign(ns, -std::numeric_limits<double>::infinity());
  m.source_max.assign(nt, -std::numeric_limits<double>::infinity());
  m.target_arg.assign(ns, 0);
  m.source_arg.assign(nt, 0);
  for (std::size_t p = 0; p < ns; ++p)
    for (std::size_t q = 0; q < nt; ++q) {
      const double v = c[p * nt + q];
      if (v > m.target_max[p]) {
        m.target_max[p] = v;
        m.target_arg[p] = q;
      }
      if (v > m.source_max[q]) {
        m.source_max[q] = v;
        m.source_arg[q] = p;
      }
    }
  return m;
}

/// c_hat = c * (c / max_ab c_abkl) * (c / max_cd c_ijcd); a zero max gives a
/// zero ratio.
inline DenseTensor mutual_nn_filter(const DenseTensor& c) {
  detail::check_corr(c, "mutual_nn_filter");
  if (!all_finite(c.data())) throw NumericError("correlation map contains non-finite values");
  const MutualMaxima m = mutual_maxima(c);
  const std::size_t ns = c.dim(1) * c.dim(2), nt = c.dim(3) * c.dim(4);
  DenseTensor out(c.shape());
  for (std::size_t p = 0; p < ns; ++p)
    for (std::size_t q = 0; q < nt; ++q) {
      const double v = c[p * nt + q];
      const double rs = m.source_max[q] == 0.0 ? 0.0 : v / m.source_max[q];
      const double rt = m.target_max[p] == 0.0 ? 0.0 : v / m.target_max[p];
      out[p * nt + q] = rs * rt * v;
    }
  return out;
}

namespace ops {

inline Variable mutual_nn_filter(Tape& tape, const Variable& c) {
  DenseTensor out = anc::mutual_nn_filter(c.value());
  MutualMaxima m = mutual_maxima(c.value());
  if (tape.tracking_branches()) {
    tape.note_branch(index_hash(m.target_arg));
    tape.note_branch(index_hash(m.source_arg));
  }
  if (!tape.recording({c})) return tape.record(std::move(out), {c}, {});
  return tape.record(std::move(out), {c}, [c, m = std::move(m)](const DenseTensor& g) {
    const DenseTensor& x = c.value();
    const std::size_t nt = m.source_max.size(), ns = m.target_max.size();
    auto gx = c.grad().data();
    std::vector<double> g_tmax(ns, 0.0), g_smax(nt, 0.0);
    // c_hat = v^3 / (S T): d/dv = 3 v^2 / (S T), d/dS = -c_hat / S, d/dT = -c_hat / T
    for (std::size_t p = 0; p < ns; ++p) {
      const double T = m.target_max[p];
      if (T == 0.0) continue;
      for (std::size_t q = 0; q < nt; ++q) {
        const double S = m.source_max[q];
        if (S == 0.0) continue;
        const double v = x[p * nt + q];
        const double gv = g[p * nt + q];
        const double st = S * T;
        gx[p * nt + q] += gv * 3.0 * v * v / st;
        const double ch = v * v * v / st;
        g_smax[q] -= gv * ch / S;
        g_tmax[p] -= gv * ch / T;
      }
    }
    for (std::size_t p = 0; p < ns; ++p) gx[p * nt + m.target_arg[p]] += g_tmax[p];
    for (std::size_t q = 0; q < nt; ++q) gx[m.source_arg[q] * nt + q] += g_smax[q];
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Matching probabilities

enum class Direction { source_to_target, target_to_source };

inline const char* direction_name(Direction d) {
  return d == Direction::source_to_target ? "source_to_target" : "target_to_source";
}

/// v^t (normalized over target cells per source cell) or v^s (normalized
/// over source cells per target cell); values are (hs, ws, ht, wt).
struct ProbabilityMap4D {
  DenseTensor values;
  Direction direction = Direction::source_to_target;

  std::size_t hs() const { return values.dim(0); }
  std::size_t ws() const { return values.dim(1); }
  std::size_t ht() const { return values.dim(2); }
  std::size_t wt() const { return values.dim(3); }
};

namespace detail {

/// Stable softmax over n values read with the given stride.
inline void softmax_strided(const double* in, double* out, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t q = 0; q < n; ++q) mx = std::max(mx, in[q * stride]);
  double s = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    const double e = std::exp(in[q * stride] - mx);
    out[q * stride] = e;
    s += e;
  }
  for (std::size_t q = 0; q < n; ++q) out[q * stride] /= s;
}

}  // namespace detail

inline ProbabilityMap4D softmax_probabilities(const DenseTensor& c_hat, Direction dir) {
  detail::check_corr(c_hat, "softmax_probabilities");
  if (!all_finite(c_hat.data())) throw NumericError("scores contain non-finite values");
  const std::size_t ns = c_hat.dim(1) * c_hat.dim(2), nt = c_hat.dim(3) * c_hat.dim(4);
  DenseTensor v(Shape{c_hat.dim(1), c_hat.dim(2), c_hat.dim(3), c_hat.dim(4)});
  const double* in = c_hat.data().data();
  double* out = v.data().data();
  if (dir == Direction::source_to_target)
    parallel_for(static_cast<std::ptrdiff_t>(ns),
                 [&](std::ptrdiff_t p) { detail::softmax_strided(in + p * nt, out + p * nt, nt, 1); });
  else
    parallel_for(static_cast<std::ptrdiff_t>(nt),
                 [&](std::ptrdiff_t q) { detail::softmax_strided(in + q, out + q, ns, nt); });
  return {std::move(v), dir};
}

namespace ops {

/// Rows of the probability map for the listed query cells (flat indices on
/// the query side), as an (n, cells on the other side) matrix.
inline Variable softmax_rows(Tape& tape, const Variable& c_hat, Direction dir,
                             std::vector<std::size_t> cells) {
  const DenseTensor& x = c_hat.value();
  detail::check_corr(x, "softmax_rows");
  if (cells.empty()) throw InvalidArgument("softmax_rows needs at least one query cell");
  if (!all_finite(x.data())) throw NumericError("scores contain non-finite values");
  const std::size_t ns = x.dim(1) * x.dim(2), nt = x.dim(3) * x.dim(4);
  const bool fwd = dir == Direction::source_to_target;
  const std::size_t len = fwd ? nt : ns, stride = fwd ? 1 : nt, limit = fwd ? ns : nt;
  for (auto q : cells)
    if (q >= limit) throw InvalidArgument("softmax_rows: query cell out of range");
  DenseTensor out(Shape{cells.size(), len});
  for (std::size_t r = 0; r < cells.size(); ++r) {
    const double* in = x.data().data() + (fwd ? cells[r] * nt : cells[r]);
    std::vector<double> tmp(len * stride);
    detail::softmax_strided(in, tmp.data(), len, stride);
    for (std::size_t t = 0; t < len; ++t) out[r * len + t] = tmp[t * stride];
  }
  DenseTensor y = out;
  return tape.record(std::move(out), {c_hat},
                     [c_hat, y = std::move(y), cells = std::move(cells), fwd, len, nt](const DenseTensor& g) {
                       if (!c_hat.requires_grad()) return;
                       auto gx = c_hat.grad().data();
                       for (std::size_t r = 0; r < cells.size(); ++r) {
                         double dot = 0.0;
                         for (std::size_t t = 0; t < len; ++t) dot += g[r * len + t] * y[r * len + t];
                         for (std::size_t t = 0; t < len; ++t) {
                           const std::size_t idx = fwd ? cells[r] * nt + t : t * nt + cells[r];
                           gx[idx] += y[r * len + t] * (g[r * len + t] - dot);
                         }
                       }
                     });
}

}  // namespace ops

struct Cell {
  std::size_t y = 0, x = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

namespace detail {

struct Slice {
  const double* base;
  std::size_t h, w, stride;
  double at(std::size_t y, std::size_t x) const { return base[(y * w + x) * stride]; }
};

inline Slice slice_of(const ProbabilityMap4D& v, Cell at) {
  const std::size_t nt = v.ht() * v.wt();
  if (v.direction == Direction::source_to_target) {
    if (at.y >= v.hs() || at.x >= v.ws()) throw InvalidArgument("source cell out of range");
    return {v.values.data().data() + (at.y * v.ws() + at.x) * nt, v.ht(), v.wt(), 1};
  }
  if (at.y >= v.ht() || at.x >= v.wt()) throw InvalidArgument("target cell out of range");
  return {v.values.data().data() + at.y * v.wt() + at.x, v.hs(), v.ws(), nt};
}

}  // namespace detail

/// Most likely match of a query cell; the lexicographically first cell wins ties.
inline Cell argmax_match(const ProbabilityMap4D& v, Cell at) {
  const detail::Slice s = detail::slice_of(v, at);
  Cell best;
  double bv = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      if (s.at(y, x) > bv) {
        bv = s.at(y, x);
        best = {y, x};
      }
  return best;
}

inline double probability_at(const ProbabilityMap4D& v, Cell at, Cell match) {
  return detail::slice_of(v, at).at(match.y, match.x);
}

/// Probability-weighted centroid of the window x window neighbourhood of the
/// argmax cell, as a (y, x) grid position.
inline std::array<double, 2> refine_subcell(const ProbabilityMap4D& v, Cell at, int window = 3) {
  if (window < 1 || window % 2 == 0) throw InvalidArgument("refinement window must be odd");
  const detail::Slice s = detail::slice_of(v, at);
  const Cell m = argmax_match(v, at);
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  double sw = 0.0, sy = 0.0, sx = 0.0;
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(m.y) + dy;
      const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(m.x) + dx;
      if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(s.h) || x >= static_cast<std::ptrdiff_t>(s.w)) continue;
      const double p = s.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      sw += p;
      sy += p * static_cast<double>(dy);
      sx += p * static_cast<double>(dx);
    }
  if (!(sw > 0.0)) return {static_cast<double>(m.y), static_cast<double>(m.x)};
  return {static_cast<double>(m.y) + sy / sw, static_cast<double>(m.x) + sx / sw};
}

/// Nearest grid cell of a pixel position, clamped to the grid.
inline Cell nearest_cell(const Keypoint& kp, std::size_t h, std::size_t w, int stride) {
  auto clampi = [](double g, std::size_t n) {
    const double r = std::round(g);
    return static_cast<std::size_t>(std::clamp(r, 0.0, static_cast<double>(n - 1)));
  };
  return {clampi(to_grid(kp.y, stride), h), clampi(to_grid(kp.x, stride), w)};
}

struct MatchRecord {
  Keypoint source_px;
  Keypoint target_px;
  double probability = 0.0;
  Cell source_cell;
  Cell target_cell;  // argmax cell before refinement
};

/// Matches a source pixel: nearest cell, argmax, sub-cell refinement, back to pixels.
inline MatchRecord match_keypoint(const ProbabilityMap4D& v, const Keypoint& kp, int stride, int window = 3) {
  if (v.direction != Direction::source_to_target)
    throw InvalidArgument("keypoint matching needs a source-to-target map");
  const Cell c = nearest_cell(kp, v.hs(), v.ws(), stride);
  const Cell m = argmax_match(v, c);
  const auto pos = refine_subcell(v, c, window);
  return {kp, {to_pixel(pos[1], stride), to_pixel(pos[0], stride)}, probability_at(v, c, m), c, m};
}

/// One record per source cell, row-major.
inline std::vector<MatchRecord> match_dense(const ProbabilityMap4D& v, int stride, int window = 3) {
  std::vector<MatchRecord> out;
  for (std::size_t i = 0; i < v.hs(); ++i)
    for (std::size_t j = 0; j < v.ws(); ++j) {
      const Keypoint kp{to_pixel(static_cast<double>(j), stride), to_pixel(static_cast<double>(i), stride)};
      out.push_back(match_keypoint(v, kp, stride, window));
    }
  return out;
}

inline nlohmann::json matches_to_json(const std::vector<MatchRecord>& records) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : records)
    list.push_back({{"source_px", {r.source_px.x, r.source_px.y}},
                    {"target_px", {r.target_px.x, r.target_px.y}},
                    {"probability", r.probability},
                    {"source_cell", {r.source_cell.y, r.source_cell.x}},
                    {"target_cell", {r.target_cell.y, r.target_cell.x}}});
  return {{"schema_version", 1}, {"matches", list}};
}

// ---------------------------------------------------------------------------
// Dense flow and warping

/// Per-pixel (dx, dy) displacements on a height x width image.
struct FlowField {
  std::size_t height = 0, width = 0;
  std::vector<double> dx, dy;

  static FlowField zeros(std::size_t h, std::size_t w) { return {h, w, std::vector<double>(h * w), std::vector<double>(h * w)}; }
};

/// Bilinear sample of a (h, w) field at a continuous position clamped to the
/// field's cell-center hull.
inline double sample_clamped(const std::vector<double>& f, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * f[y0 * w + x0] + fx * f[y0 * w + x1]) +
         fy * ((1 - fx) * f[y1 * w + x0] + fx * f[y1 * w + x1]);
}

/// Cell displacement to_pixel(refined match) - to_pixel(cell), upsampled
/// bilinearly to every pixel of an image_h x image_w image.
inline FlowField dense_flow(const ProbabilityMap4D& v, int stride, std::size_t image_h, std::size_t image_w,
                            int window = 3) {
  if (v.direction != Direction::source_to_target) throw InvalidArgument("dense flow needs a source-to-target map");
  if (image_h == 0 || image_w == 0) throw InvalidArgument("empty image");
  const std::size_t h = v.hs(), w = v.ws();
  std::vector<double> cdx(h * w), cdy(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const auto pos = refine_subcell(v, {i, j}, window);
      cdx[i * w + j] = to_pixel(pos[1], stride) - to_pixel(static_cast<double>(j), stride);
      cdy[i * w + j] = to_pixel(pos[0], stride) - to_pixel(static_cast<double>(i), stride);
    }
  FlowField f = FlowField::zeros(image_h, image_w);
  for (std::size_t py = 0; py < image_h; ++py)
    for (std::size_t px = 0; px < image_w; ++px) {
      const double gy = to_grid(static_cast<double>(py), stride), gx = to_grid(static_cast<double>(px), stride);
      f.dx[py * image_w + px] = sample_clamped(cdx, h, w, gy, gx);
      f.dy[py * image_w + px] = sample_clamped(cdy, h, w, gy, gx);
    }
  return f;
}

/// out[p] = image sampled bilinearly at p + flow[p]; positions outside the
/// pixel-center hull give 0. image is (h, w) or (h, w, channels).
inline DenseTensor warp_bilinear(const DenseTensor& image, const FlowField& flow) {
  if (image.rank() != 2 && image.rank() != 3) throw InvalidArgument("image must be (h, w) or (h, w, c)");
  const std::size_t h = image.dim(0), w = image.dim(1), ch = image.rank() == 3 ? image.dim(2) : 1;
  if (flow.height != h || flow.width != w) throw InvalidArgument("flow dims do not match the image");
  DenseTensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double sy = static_cast<double>(y) + flow.dy[y * w + x];
      const double sx = static_cast<double>(x) + flow.dx[y * w + x];
      if (!(sy >= 0.0 && sx >= 0.0 && sy <= static_cast<double>(h - 1) && sx <= static_cast<double>(w - 1))) continue;
      const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < ch; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return image[(yy * w + xx) * ch + c]; };
        out[(y * w + x) * ch + c] =
            (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) + fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
      }
    }
  return out;
}


// ---------------------------------------------------------------------------
// Heatmaps

/// The (ht, wt) probability slice of one source cell.
inline DenseTensor probability_slice(const ProbabilityMap4D& v, Cell at) {
  const detail::Slice s = detail::slice_of(v, at);
  DenseTensor out(Shape{s.h, s.w});
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) out[y * s.w + x] = s.at(y, x);
  return out;
}

/// Binary PGM (P5, maxval 255) of a 2D slice, min-max scaled to 0..255 with
/// rounding. A constant slice has no range and maps to all zeros.
inline std::string pgm_bytes(const DenseTensor& slice) {
  if (slice.rank() != 2 || slice.size() == 0) throw InvalidArgument("heatmap needs a nonempty 2D slice");
  if (!all_finite(slice.data())) throw NumericError("heatmap slice contains non-finite values");
  const auto [lo, hi] = std::minmax_element(slice.data().begin(), slice.data().end());
  const double mn = *lo, range = *hi - *lo;
  std::string out = "P5\n" + std::to_string(slice.dim(1)) + " " + std::to_string(slice.dim(0)) + "\n255\n";
  for (double v : slice.data()) {
    const double t = range > 0.0 ? (v - mn) / range : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const DenseTensor& slice) {
  const std::string bytes = pgm_bytes(slice);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing", path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed", path.string());
}

}  // namespace anc
