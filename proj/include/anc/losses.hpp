#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "anc/autodiff.hpp"
#include "anc/errors.hpp"
#include "anc/features.hpp"
#include "anc/matching.hpp"
#include "anc/tensor.hpp"

namespace anc {

struct LossConfig {
  double alpha = 0.001;
  int gaussian_kernel = 5;
  /// 0 selects kernel / 4.
  double gaussian_sigma = 0.0;

  double sigma() const { return gaussian_sigma > 0.0 ? gaussian_sigma : gaussian_kernel / 4.0; }

  void validate() const {
    if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
    if (gaussian_kernel < 0 || (gaussian_kernel != 0 && gaussian_kernel % 2 == 0))
      throw InvalidArgument("gaussian kernel must be 0 or odd, got " + std::to_string(gaussian_kernel));
    if (gaussian_sigma < 0.0) throw InvalidArgument("gaussian sigma must be positive");
  }
};

struct CellWeight {
  std::size_t y, x;
  double w;
};

/// Bilinear weights of a continuous grid position on its four enclosing
/// cells, clamped to the grid. The last weight is 1 minus the others, which
/// makes the sum ((w0 + w1) + w2) + w3 exactly 1.
inline std::array<CellWeight, 4> bilinear_weights(double gy, double gx, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw InvalidArgument("degenerate grid");
  gy = std::clamp(gy, 0.0, static_cast<double>(h - 1));
  gx = std::clamp(gx, 0.0, static_cast<double>(w - 1));
  const std::size_t y0 = h == 1 ? 0 : std::min(static_cast<std::size_t>(std::floor(gy)), h - 2);
  const std::size_t x0 = w == 1 ? 0 : std::min(static_cast<std::size_t>(std::floor(gx)), w - 2);
  const std::size_t y1 = h == 1 ? 0 : y0 + 1, x1 = w == 1 ? 0 : x0 + 1;
  const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
  const double w00 = (1.0 - fx) * (1.0 - fy);
  const double w01 = fx * (1.0 - fy);
  const double w10 = (1.0 - fx) * fy;
  const double w11 = 1.0 - ((w00 + w01) + w10);
  return {{{y0, x0, w00}, {y0, x1, w01}, {y1, x0, w10}, {y1, x1, w11}}};
}

/// Normalized 1D Gaussian taps of odd size k.
inline std::vector<double> gaussian_taps(int k, double sigma) {
  std::vector<double> t(static_cast<std::size_t>(k));
  double s = 0.0;
  for (int i = 0; i < k; ++i) {
    const double d = i - k / 2;
    t[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += t[static_cast<std::size_t>(i)];
  }
  for (auto& v : t) v /= s;
  return t;
}

/// Separable zero-padded Gaussian blur of an (h, w) map, rows then columns.
inline DenseTensor gaussian_smooth(const DenseTensor& m, int kernel, double sigma) {
  if (kernel == 0) return m;
  const auto taps = gaussian_taps(kernel, sigma);
  const auto h = static_cast<std::ptrdiff_t>(m.dim(0)), w = static_cast<std::ptrdiff_t>(m.dim(1));
  const std::ptrdiff_t r = kernel / 2;
  DenseTensor tmp(m.shape()), out(m.shape());
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t)
        if (x + t >= 0 && x + t < w) s += taps[static_cast<std::size_t>(t + r)] * m[static_cast<std::size_t>(y * w + x + t)];
      tmp[static_cast<std::size_t>(y * w + x)] = s;
    }
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t)
        if (y + t >= 0 && y + t < h) s += taps[static_cast<std::size_t>(t + r)] * tmp[static_cast<std::size_t>((y + t) * w + x)];
      out[static_cast<std::size_t>(y * w + x)] = s;
    }
  return out;
}

/// Target map of one pixel keypoint on an h x w grid: bilinear weights on
/// the four nearest cells, Gaussian smoothing, L2 normalization.
inline DenseTensor gt_probability_map(const Keypoint& kp, std::size_t h, std::size_t w, int stride,
                                      const LossConfig& cfg) {
  if (h == 0 || w == 0) throw InvalidArgument("degenerate grid");
  cfg.validate();
  DenseTensor m(Shape{h, w});
  for (const auto& c : bilinear_weights(to_grid(kp.y, stride), to_grid(kp.x, stride), h, w))
    m.at(c.y, c.x) += c.w;
  m = gaussian_smooth(m, cfg.gaussian_kernel, cfg.sigma());
  double ss = 0.0;
  for (double v : m.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  for (auto& v : m.data()) v /= norm;
  return m;
}

/// Predictions and targets for both matching directions; rows follow the
/// keypoint order.
struct MatchMatrices {
  Variable ms, ms_gt;  // (n, ht * wt)
  Variable mt, mt_gt;  // (n, hs * ws)
};

/// M^s rows: probabilities over target cells for the cell nearest each
/// source keypoint; M^s_gt rows: target maps of the target keypoints.
/// M^t / M^t_gt swap the roles.
inline MatchMatrices build_match_matrices(Tape& tape, const PairAnnotation& pair, const Variable& c_hat,
                                          int stride, const LossConfig& cfg) {
  const DenseTensor& c = c_hat.value();
  detail::check_corr(c, "build_match_matrices");
  const auto& ks = pair.source.keypoints;
  const auto& kt = pair.target.keypoints;
  if (ks.size() != kt.size())
    throw InvalidArgument("keypoint count mismatch: " + std::to_string(ks.size()) + " source vs " +
                          std::to_string(kt.size()) + " target");
  if (ks.empty()) throw InvalidArgument("pair has no keypoints");
  const std::size_t hs = c.dim(1), ws = c.dim(2), ht = c.dim(3), wt = c.dim(4);
  const std::size_t n = ks.size();
  std::vector<std::size_t> src_cells, tgt_cells;
  DenseTensor gs(Shape{n, ht * wt}), gt(Shape{n, hs * ws});
  for (std::size_t r = 0; r < n; ++r) {
    const Cell a = nearest_cell(ks[r], hs, ws, stride);
    const Cell b = nearest_cell(kt[r], ht, wt, stride);
    src_cells.push_back(a.y * ws + a.x);
    tgt_cells.push_back(b.y * wt + b.x);
    const DenseTensor mt = gt_probability_map(kt[r], ht, wt, stride, cfg);
    const DenseTensor msrc = gt_probability_map(ks[r], hs, ws, stride, cfg);
    std::copy(mt.data().begin(), mt.data().end(), gs.data().begin() + r * ht * wt);
    std::copy(msrc.data().begin(), msrc.data().end(), gt.data().begin() + r * hs * ws);
  }
  return {ops::softmax_rows(tape, c_hat, Direction::source_to_target, std::move(src_cells)), Variable(std::move(gs)),
          ops::softmax_rows(tape, c_hat, Direction::target_to_source, std::move(tgt_cells)), Variable(std::move(gt))};
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {
inline void check_pair(const DenseTensor& a, const DenseTensor& b, const char* what) {
  if (a.rank() != 2 || !(a.shape() == b.shape()))
    throw InvalidArgument(std::string(what) + ": matrix dims differ (" + a.shape().str() + " vs " +
                          b.shape().str() + ")");
}

/// G = M M^T for an (n, m) matrix.
inline std::vector<double> gram(const DenseTensor& m) {
  const std::size_t n = m.dim(0), k = m.dim(1);
  std::vector<double> g(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += m[a * k + t] * m[b * k + t];
      g[a * n + b] = s;
    }
  return g;
}
}  // namespace detail

inline double frobenius_distance(const DenseTensor& a, const DenseTensor& b) {
  detail::check_pair(a, b, "frobenius_distance");
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(ss);
}

inline double gram_distance(const DenseTensor& m, const DenseTensor& g) {
  detail::check_pair(m, g, "gram_distance");
  const auto a = detail::gram(m), b = detail::gram(g);
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(ss);
}

inline double loss_keypoint(const DenseTensor& ms, const DenseTensor& ms_gt, const DenseTensor& mt,
                            const DenseTensor& mt_gt) {
  return frobenius_distance(ms, ms_gt) + frobenius_distance(mt, mt_gt);
}

inline double loss_orthogonal(const DenseTensor& ms, const DenseTensor& ms_gt, const DenseTensor& mt,
                              const DenseTensor& mt_gt) {
  return gram_distance(ms, ms_gt) + gram_distance(mt, mt_gt);
}

inline double loss_total(double lk, double lo, const LossConfig& cfg) {
  if (!(cfg.alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
  return lk + cfg.alpha * lo;
}

namespace ops {

/// ||a - b||_F; the subgradient at a == b is zero.
inline Variable frobenius_distance(Tape& tape, const Variable& a, const Variable& b) {
  const double d = anc::frobenius_distance(a.value(), b.value());
  return tape.record(DenseTensor(Shape{1}, {d}), {a, b}, [a, b, d](const DenseTensor& g) {
    if (d == 0.0) return;
    const double s = g[0] / d;
    if (a.requires_grad()) {
      auto ga = a.grad().data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * (a.value()[i] - b.value()[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad().data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= s * (a.value()[i] - b.value()[i]);
    }
  });
}

/// ||M M^T - G G^T||_F, differentiable in M (G is a fixed target).
inline Variable gram_distance(Tape& tape, const Variable& m, const Variable& target) {
  detail::check_pair(m.value(), target.value(), "gram_distance");
  const auto a = detail::gram(m.value()), b = detail::gram(target.value());
  std::vector<double> diff(a.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff[i] = a[i] - b[i];
    ss += diff[i] * diff[i];
  }
  const double dist = std::sqrt(ss);
  return tape.record(DenseTensor(Shape{1}, {dist}), {m},
                     [m, dist, diff = std::move(diff)](const DenseTensor& g) {
                       if (dist == 0.0 || !m.requires_grad()) return;
                       // d/dM = 2 D M / ||D|| with D symmetric
                       const std::size_t n = m.value().dim(0), k = m.value().dim(1);
                       const double s = 2.0 * g[0] / dist;
                       auto gm = m.grad().data();
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t q = 0; q < n; ++q) {
                           const double dq = s * diff[r * n + q];
                           if (dq == 0.0) continue;
                           for (std::size_t t = 0; t < k; ++t) gm[r * k + t] += dq * m.value()[q * k + t];
                         }
                     });
}

inline Variable loss_keypoint(Tape& tape, const MatchMatrices& mm) {
  return add(tape, frobenius_distance(tape, mm.ms, mm.ms_gt), frobenius_distance(tape, mm.mt, mm.mt_gt));
}

inline Variable loss_orthogonal(Tape& tape, const MatchMatrices& mm) {
  return add(tape, gram_distance(tape, mm.ms, mm.ms_gt), gram_distance(tape, mm.mt, mm.mt_gt));
}

inline Variable loss_total(Tape& tape, const Variable& lk, const Variable& lo, const LossConfig& cfg) {
  if (!(cfg.alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
  return add(tape, lk, scale(tape, lo, cfg.alpha));
}

}  // namespace ops

}  // namespace anc
