#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "anc/autodiff.hpp"
#include "anc/errors.hpp"
#include "anc/features.hpp"
#include "anc/parallel.hpp"
#include "anc/rng.hpp"
#include "anc/tensor.hpp"

namespace anc {

struct SelfSimConfig {
  int window = 5;
  int conv_kernel = 3;
  int channels_1 = 25;
  int channels_2 = 25;

  /// Defaults with both conv widths equal to window^2.
  static SelfSimConfig with_window(int window) {
    return {window, 3, window * window, window * window};
  }

  int base_channels() const { return window * window; }
  int output_depth() const { return base_channels() + channels_1 + channels_2; }

  void validate() const {
    if (window < 1 || window % 2 == 0) throw InvalidArgument("self-similarity window must be odd");
    if (conv_kernel < 1 || conv_kernel % 2 == 0) throw InvalidArgument("conv kernel must be odd");
    if (channels_1 < 1 || channels_2 < 1) throw InvalidArgument("conv channels must be positive");
  }
};

struct SelfSimParams {
  Variable k1, b1, k2, b2;

  /// Kernels uniform(-a, a) with a = 1/sqrt(fan_in); zero biases.
  static SelfSimParams init(const SelfSimConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto k = static_cast<std::size_t>(cfg.conv_kernel);
    const auto c0 = static_cast<std::size_t>(cfg.base_channels());
    const auto c1 = static_cast<std::size_t>(cfg.channels_1);
    const auto c2 = static_cast<std::size_t>(cfg.channels_2);
    const double a1 = 1.0 / std::sqrt(static_cast<double>(k * k * c0));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(k * k * c1));
    return {Variable(rng_fill(rng, Shape{k, k, c0, c1}, Uniform{-a1, a1}), true),
            Variable(DenseTensor(Shape{c1}), true),
            Variable(rng_fill(rng, Shape{k, k, c1, c2}, Uniform{-a2, a2}), true),
            Variable(DenseTensor(Shape{c2}), true)};
  }

  std::vector<NamedParam> parameters() const {
    return {{"selfsim.k1", k1}, {"selfsim.b1", b1}, {"selfsim.k2", k2}, {"selfsim.b2", b2}};
  }

  void check(const SelfSimConfig& cfg) const {
    const auto k = static_cast<std::size_t>(cfg.conv_kernel);
    if (!(k1.shape() == Shape{k, k, static_cast<std::size_t>(cfg.base_channels()),
                              static_cast<std::size_t>(cfg.channels_1)}) ||
        !(b1.shape() == Shape{static_cast<std::size_t>(cfg.channels_1)}) ||
        !(k2.shape() == Shape{k, k, static_cast<std::size_t>(cfg.channels_1),
                              static_cast<std::size_t>(cfg.channels_2)}) ||
        !(b2.shape() == Shape{static_cast<std::size_t>(cfg.channels_2)}))
      throw InvalidArgument("self-similarity parameters do not match the configuration");
  }
};

/// Channel c at (i, j) is <f[i, j], f[i + dy, j + dx]> with (dy, dx) running
/// row-major over the window from (-r, -r). Out-of-bounds neighbours give 0.
inline DenseTensor self_sim_base(const DenseTensor& f, int window) {
  if (window < 1 || window % 2 == 0) throw InvalidArgument("self-similarity window must be odd");
  if (f.rank() != 3) throw InvalidArgument("expected a rank-3 (h, w, d) map");
  const auto h = static_cast<std::ptrdiff_t>(f.dim(0));
  const auto w = static_cast<std::ptrdiff_t>(f.dim(1));
  const std::size_t d = f.dim(2);
  const int r = window / 2;
  const auto nc = static_cast<std::size_t>(window * window);
  DenseTensor out(Shape{f.dim(0), f.dim(1), nc});
  const double* pf = f.data().data();
  double* po = out.data().data();
  for (std::ptrdiff_t i = 0; i < h; ++i)
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      const double* a = pf + (i * w + j) * d;
      std::size_t c = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx, ++c) {
          const std::ptrdiff_t y = i + dy, x = j + dx;
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          const double* b = pf + (y * w + x) * d;
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
          po[(i * w + j) * nc + c] = s;
        }
    }
  return out;
}

inline DenseTensor self_sim_base(const FeatureMap& f, int window) {
  return self_sim_base(f.values, window);
}

namespace detail {

inline void check_conv2d(const DenseTensor& x, const DenseTensor& kernel, const DenseTensor& bias) {
  if (x.rank() != 3) throw InvalidArgument("conv2d input must be (h, w, c_in)");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) || kernel.dim(0) % 2 == 0)
    throw InvalidArgument("conv2d kernel must be (k, k, c_in, c_out) with odd k");
  if (kernel.dim(2) != x.dim(2))
    throw InvalidArgument("conv2d channel mismatch: input " + std::to_string(x.dim(2)) +
                          ", kernel " + std::to_string(kernel.dim(2)));
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(3))
    throw InvalidArgument("conv2d bias must have c_out entries");
}

inline DenseTensor conv2d_linear(const DenseTensor& x, const DenseTensor& kernel,
                                 const DenseTensor& bias) {
  check_conv2d(x, kernel, bias);
  const auto h = static_cast<std::ptrdiff_t>(x.dim(0));
  const auto w = static_cast<std::ptrdiff_t>(x.dim(1));
  const std::size_t ci = x.dim(2), co = kernel.dim(3);
  const auto k = static_cast<std::ptrdiff_t>(kernel.dim(0));
  const std::ptrdiff_t r = k / 2;
  DenseTensor out(Shape{x.dim(0), x.dim(1), co});
  const double* px = x.data().data();
  const double* pk = kernel.data().data();
  double* po = out.data().data();
  parallel_for(h, [&](std::ptrdiff_t i) {
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      double* o = po + (i * w + j) * co;
      for (std::size_t oc = 0; oc < co; ++oc) o[oc] = bias[oc];
      for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t y = i + ky - r;
        if (y < 0 || y >= h) continue;
        for (std::ptrdiff_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t xx = j + kx - r;
          if (xx < 0 || xx >= w) continue;
          const double* in = px + (y * w + xx) * ci;
          const double* kk = pk + (ky * k + kx) * ci * co;
          for (std::size_t c = 0; c < ci; ++c) {
            const double v = in[c];
            for (std::size_t oc = 0; oc < co; ++oc) o[oc] += v * kk[c * co + oc];
          }
        }
      }
    }
  });
  return out;
}

}  // namespace detail

/// Same-size zero-padded 2D cross-correlation, optionally followed by ReLU.
inline DenseTensor conv2d(const DenseTensor& x, const DenseTensor& kernel, const DenseTensor& bias,
                          bool relu) {
  DenseTensor out = detail::conv2d_linear(x, kernel, bias);
  if (relu)
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

namespace ops {

inline Variable conv2d(Tape& tape, const Variable& x, const Variable& kernel, const Variable& bias,
                       bool relu) {
  DenseTensor pre = detail::conv2d_linear(x.value(), kernel.value(), bias.value());
  DenseTensor out = pre;
  if (relu) {
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    if (tape.tracking_branches())
      tape.note_branch(mask_hash(pre.data(), [](double v) { return v > 0.0; }));
  }
  if (!tape.recording({x, kernel, bias})) return tape.record(std::move(out), {x, kernel, bias}, {});
  return tape.record(std::move(out), {x, kernel, bias},
                     [x, kernel, bias, relu, pre = std::move(pre)](const DenseTensor& gout) {
    const auto h = static_cast<std::ptrdiff_t>(x.value().dim(0));
    const auto w = static_cast<std::ptrdiff_t>(x.value().dim(1));
    const std::size_t ci = x.value().dim(2), co = kernel.value().dim(3);
    const auto k = static_cast<std::ptrdiff_t>(kernel.value().dim(0));
    const std::ptrdiff_t r = k / 2;
    DenseTensor g = gout;
    if (relu)
      for (std::size_t n = 0; n < g.size(); ++n)
        if (!(pre[n] > 0.0)) g[n] = 0.0;
    const double* pg = g.data().data();
    if (bias.requires_grad()) {
      auto gb = bias.grad().data();
      for (std::ptrdiff_t n = 0; n < h * w; ++n)
        for (std::size_t oc = 0; oc < co; ++oc) gb[oc] += pg[n * co + oc];
    }
    if (kernel.requires_grad()) {
      double* gk = kernel.grad().data().data();
      const double* px = x.value().data().data();
      parallel_for(k * k, [&](std::ptrdiff_t t) {
        const std::ptrdiff_t ky = t / k, kx = t % k;
        double* kk = gk + t * ci * co;
        for (std::ptrdiff_t i = 0; i < h; ++i) {
          const std::ptrdiff_t y = i + ky - r;
          if (y < 0 || y >= h) continue;
          for (std::ptrdiff_t j = 0; j < w; ++j) {
            const std::ptrdiff_t xx = j + kx - r;
            if (xx < 0 || xx >= w) continue;
            const double* in = px + (y * w + xx) * ci;
            const double* gg = pg + (i * w + j) * co;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t oc = 0; oc < co; ++oc) kk[c * co + oc] += in[c] * gg[oc];
          }
        }
      });
    }
    if (x.requires_grad()) {
      double* gx = x.grad().data().data();
      const double* pk = kernel.value().data().data();
      parallel_for(h, [&](std::ptrdiff_t y) {
        for (std::ptrdiff_t xx = 0; xx < w; ++xx) {
          double* gi = gx + (y * w + xx) * ci;
          for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t i = y - ky + r;
            if (i < 0 || i >= h) continue;
            for (std::ptrdiff_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t j = xx - kx + r;
              if (j < 0 || j >= w) continue;
              const double* gg = pg + (i * w + j) * co;
              const double* kk = pk + (ky * k + kx) * ci * co;
              for (std::size_t c = 0; c < ci; ++c) {
                double s = 0.0;
                for (std::size_t oc = 0; oc < co; ++oc) s += kk[c * co + oc] * gg[oc];
                gi[c] += s;
              }
            }
          }
        }
      });
    }
  });
}

}  // namespace ops

/// S = normalize([S0 | S1 | S2]) with S1 = relu(conv(S0)), S2 = relu(conv(S1)).
inline Variable multiscale_forward(Tape& tape, const FeatureMap& f, const SelfSimConfig& cfg,
                                   const SelfSimParams& params) {
  cfg.validate();
  params.check(cfg);
  const Variable s0(self_sim_base(f.values, cfg.window));
  const Variable s1 = ops::conv2d(tape, s0, params.k1, params.b1, true);
  const Variable s2 = ops::conv2d(tape, s1, params.k2, params.b2, true);
  const Variable s = ops::concat_last(tape, {s0, s1, s2});
  return ops::l2_normalize_cells(tape, s);
}

}  // namespace anc
