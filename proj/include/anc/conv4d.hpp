#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <fftw3.h>

#include "anc/autodiff.hpp"
#include "anc/errors.hpp"
#include "anc/parallel.hpp"
#include "anc/rng.hpp"
#include "anc/tensor.hpp"

namespace anc {

/// Odd spatial extents over the (i, j, k, l) axes: p_s x q_s on the source
/// side, p_t x q_t on the target side.
struct KernelShape {
  int ps = 5, qs = 5, pt = 5, qt = 5;

  static KernelShape isotropic(int n) { return {n, n, n, n}; }
  bool valid() const {
    return ps > 0 && qs > 0 && pt > 0 && qt > 0 && ps % 2 && qs % 2 && pt % 2 && qt % 2;
  }
  std::size_t taps() const { return static_cast<std::size_t>(ps * qs * pt * qt); }
  std::array<int, 4> extents() const { return {ps, qs, pt, qt}; }
  std::string str() const {
    return std::to_string(ps) + "x" + std::to_string(qs) + "x" + std::to_string(pt) + "x" +
           std::to_string(qt);
  }
  friend bool operator==(const KernelShape&, const KernelShape&) = default;
};

enum class Conv4dAlgo { naive, fast, fft };

inline const char* algo_name(Conv4dAlgo a) {
  switch (a) {
    case Conv4dAlgo::naive: return "naive";
    case Conv4dAlgo::fast: return "fast";
    case Conv4dAlgo::fft: return "fft";
  }
  return "?";
}

inline Conv4dAlgo parse_algo(const std::string& s) {
  if (s == "naive") return Conv4dAlgo::naive;
  if (s == "fast") return Conv4dAlgo::fast;
  if (s == "fft") return Conv4dAlgo::fft;
  throw InvalidArgument("unknown conv4d algorithm '" + s + "'");
}

namespace fft {

template <typename T>
struct Allocator {
  using value_type = T;
  Allocator() = default;
  template <typename U>
  Allocator(const Allocator<U>&) {}
  T* allocate(std::size_t n) {
    void* p = fftw_malloc(n * sizeof(T));
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { fftw_free(p); }
  template <typename U>
  bool operator==(const Allocator<U>&) const { return true; }
};

using cplx = std::complex<double>;
using RealBuf = std::vector<double, Allocator<double>>;
using CplxBuf = std::vector<cplx, Allocator<cplx>>;

/// count half-spectra of cplx_size() entries each in one uninitialized,
/// SIMD-aligned block (rows padded to 64 bytes).
class Spectra {
 public:
  Spectra() = default;
  Spectra(std::size_t count, std::size_t size)
      : count_(count), size_(size), stride_((size + 3) & ~std::size_t{3}) {
    void* p = fftw_malloc(std::max<std::size_t>(1, count * stride_) * sizeof(cplx));
    if (!p) throw std::bad_alloc();
    data_.reset(static_cast<cplx*>(p));
  }
  std::size_t size() const { return count_; }
  std::size_t length() const { return size_; }
  cplx* operator[](std::size_t i) { return data_.get() + i * stride_; }
  const cplx* operator[](std::size_t i) const { return data_.get() + i * stride_; }

 private:
  struct Free {
    void operator()(cplx* p) const { fftw_free(p); }
  };
  std::size_t count_ = 0, size_ = 0, stride_ = 0;
  std::unique_ptr<cplx[], Free> data_;
};

/// Smallest 2^a 5^b that is >= n. Factors of 3 are skipped: estimated
/// 4D plans for those sizes run several times slower (18^4 vs 20^4).
inline std::size_t nice_size(std::size_t n) {
  for (std::size_t m = std::max<std::size_t>(n, 1);; ++m) {
    std::size_t r = m;
    for (std::size_t f : {2, 5})
      while (r % f == 0) r /= f;
    if (r == 1) return m;
  }
}

/// Periodic 4D grid large enough that zero-padded cross-correlation of an
/// extent-n signal with a radius-r kernel does not wrap.
struct Grid {
  std::array<int, 4> n{};  // signal extents
  std::array<int, 4> L{};  // transform extents

  static Grid for_signal(std::array<int, 4> extents, std::array<int, 4> radius) {
    Grid g;
    g.n = extents;
    for (int a = 0; a < 4; ++a)
      g.L[a] = static_cast<int>(nice_size(static_cast<std::size_t>(
          std::max(extents[a] + radius[a], 2 * radius[a] + 1))));
    return g;
  }
  std::size_t real_size() const {
    return static_cast<std::size_t>(L[0]) * L[1] * L[2] * L[3];
  }
  std::size_t cplx_size() const {
    return static_cast<std::size_t>(L[0]) * L[1] * L[2] * (L[3] / 2 + 1);
  }
  std::size_t signal_size() const {
    return static_cast<std::size_t>(n[0]) * n[1] * n[2] * n[3];
  }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// FFTW plans per transform size. Planning is serialized; executing a plan
/// on fresh (equally aligned) buffers is thread-safe.
class Plans {
 public:
  struct Pair {
    fftw_plan r2c;
    fftw_plan c2r;
  };

  static const Pair& get(const std::array<int, 4>& L) {
    static Plans instance;
    std::lock_guard lock(instance.mu_);
    auto it = instance.plans_.find(L);
    if (it != instance.plans_.end()) return it->second;
    const std::size_t rs = static_cast<std::size_t>(L[0]) * L[1] * L[2] * L[3];
    const std::size_t cs = static_cast<std::size_t>(L[0]) * L[1] * L[2] * (L[3] / 2 + 1);
    RealBuf r(rs);
    CplxBuf c(cs);
    auto* cp = reinterpret_cast<fftw_complex*>(c.data());
    Pair p{fftw_plan_dft_r2c(4, L.data(), r.data(), cp, FFTW_ESTIMATE),
           fftw_plan_dft_c2r(4, L.data(), cp, r.data(), FFTW_ESTIMATE)};
    return instance.plans_.emplace(L, p).first->second;
  }

  ~Plans() {
    for (auto& [k, p] : plans_) {
      fftw_destroy_plan(p.r2c);
      fftw_destroy_plan(p.c2r);
    }
  }

 private:
  std::mutex mu_;
  std::map<std::array<int, 4>, Pair> plans_;
};

/// acc += a * b, or acc = a * b without Accumulate (conj_b: a * conj(b)),
/// over n complex values. Written on
/// the interleaved doubles so it vectorizes without the NaN recovery of
/// std::complex multiplication.
template <bool Accumulate>
inline void mul_into(cplx* acc, const cplx* a, const cplx* b, std::size_t n, bool conj_b) {
  double* r = reinterpret_cast<double*>(acc);
  const double* x = reinterpret_cast<const double*>(a);
  const double* y = reinterpret_cast<const double*>(b);
  const double s = conj_b ? -1.0 : 1.0;
  for (std::size_t f = 0; f < n; ++f) {
    const double xr = x[2 * f], xi = x[2 * f + 1], yr = y[2 * f], yi = s * y[2 * f + 1];
    if constexpr (Accumulate) {
      r[2 * f] += xr * yr - xi * yi;
      r[2 * f + 1] += xr * yi + xi * yr;
    } else {
      r[2 * f] = xr * yr - xi * yi;
      r[2 * f + 1] = xr * yi + xi * yr;
    }
  }
}

/// out = conj(a) * b over n complex values.
inline void conj_mul(cplx* out, const cplx* a, const cplx* b, std::size_t n) {
  double* r = reinterpret_cast<double*>(out);
  const double* x = reinterpret_cast<const double*>(a);
  const double* y = reinterpret_cast<const double*>(b);
  for (std::size_t f = 0; f < n; ++f) {
    const double xr = x[2 * f], xi = -x[2 * f + 1], yr = y[2 * f], yi = y[2 * f + 1];
    r[2 * f] = xr * yr - xi * yi;
    r[2 * f + 1] = xr * yi + xi * yr;
  }
}

namespace scratch {

/// Per-thread real buffer that is all zero between calls.
inline double* zero_real(std::size_t n) {
  thread_local RealBuf buf;
  if (buf.size() < n) buf.assign(n, 0.0);
  return buf.data();
}

/// Per-thread real output buffer (contents unspecified).
inline double* real_out(std::size_t n) {
  thread_local RealBuf buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

/// Per-thread spectrum buffer, zero-filled unless `clear` is false.
inline cplx* spectrum(std::size_t n, bool clear = true) {
  thread_local CplxBuf buf;
  if (buf.size() < n) buf.resize(n);
  if (clear) std::fill_n(buf.data(), n, cplx(0.0, 0.0));
  return buf.data();
}

}  // namespace scratch

/// Running sum of spectrum products in the per-thread buffer. The first
/// term overwrites, which spares clearing the buffer.
class SpectrumSum {
 public:
  explicit SpectrumSum(std::size_t n) : p_(scratch::spectrum(n, false)), n_(n) {}
  void add(const cplx* a, const cplx* b, bool conj_b) {
    if (empty_)
      mul_into<false>(p_, a, b, n_, conj_b);
    else
      mul_into<true>(p_, a, b, n_, conj_b);
    empty_ = false;
  }
  cplx* get() {
    if (empty_) std::fill_n(p_, n_, cplx(0.0, 0.0));
    empty_ = false;
    return p_;
  }

 private:
  cplx* p_;
  std::size_t n_;
  bool empty_ = true;
};

inline std::size_t offset(const std::array<int, 4>& L, int a, int b, int c, int d) {
  return ((static_cast<std::size_t>(a) * L[1] + b) * L[2] + c) * L[3] + d;
}

/// Spectrum of one zero-padded (n0, n1, n2, n3) block.
inline void forward_into(const Grid& g, const double* src, cplx* out) {
  // The padding stays zero between calls on the same grid; only the
  // signal region is overwritten.
  thread_local RealBuf buf;
  thread_local Grid last;
  if (!(last == g) || buf.size() < g.real_size()) {
    buf.assign(g.real_size(), 0.0);
    last = g;
  }
  double* r = buf.data();
  for (int a = 0; a < g.n[0]; ++a)
    for (int b = 0; b < g.n[1]; ++b)
      for (int c = 0; c < g.n[2]; ++c) {
        const double* s = src + ((static_cast<std::size_t>(a) * g.n[1] + b) * g.n[2] + c) * g.n[3];
        double* d = r + offset(g.L, a, b, c, 0);
        for (int e = 0; e < g.n[3]; ++e) d[e] = s[e];
      }
  fftw_execute_dft_r2c(Plans::get(g.L).r2c, r, reinterpret_cast<fftw_complex*>(out));
}

/// Inverse transform of `spec` (consumed), scaled by 1/N, cropped to the
/// signal extents and added into dst.
inline void inverse_add(const Grid& g, cplx* spec, double* dst) {
  double* r = scratch::real_out(g.real_size());
  fftw_execute_dft_c2r(Plans::get(g.L).c2r, reinterpret_cast<fftw_complex*>(spec), r);
  const double inv = 1.0 / static_cast<double>(g.real_size());
  for (int a = 0; a < g.n[0]; ++a)
    for (int b = 0; b < g.n[1]; ++b)
      for (int c = 0; c < g.n[2]; ++c) {
        const double* s = r + offset(g.L, a, b, c, 0);
        double* d = dst + ((static_cast<std::size_t>(a) * g.n[1] + b) * g.n[2] + c) * g.n[3];
        for (int e = 0; e < g.n[3]; ++e) d[e] += s[e] * inv;
      }
}

/// Periodic position of kernel offset t along an axis of extent e.
inline int wrap(int t, int e, int L) { return (t - e / 2 + L) % L; }

/// Inverse transform read back at the periodic offsets delta in [-r, r]
/// per axis, added into dst in the kernel layout.
inline void inverse_kernel_add(const Grid& g, cplx* spec, const KernelShape& ks, double* dst) {
  double* r = scratch::real_out(g.real_size());
  fftw_execute_dft_c2r(Plans::get(g.L).c2r, reinterpret_cast<fftw_complex*>(spec), r);
  const double inv = 1.0 / static_cast<double>(g.real_size());
  const auto e = ks.extents();
  std::size_t t = 0;
  for (int a = 0; a < e[0]; ++a)
    for (int b = 0; b < e[1]; ++b)
      for (int c = 0; c < e[2]; ++c)
        for (int d = 0; d < e[3]; ++d, ++t)
          dst[t] += r[offset(g.L, wrap(a, e[0], g.L[0]), wrap(b, e[1], g.L[1]), wrap(c, e[2], g.L[2]),
                             wrap(d, e[3], g.L[3]))] * inv;
}

/// Spectrum of one kernel placed at periodic offsets delta mod L.
inline void kernel_forward_into(const Grid& g, const double* w, const KernelShape& ks, cplx* out) {
  double* r = scratch::zero_real(g.real_size());
  const auto e = ks.extents();
  auto each_tap = [&](auto&& fn) {
    std::size_t t = 0;
    for (int a = 0; a < e[0]; ++a)
      for (int b = 0; b < e[1]; ++b)
        for (int c = 0; c < e[2]; ++c)
          for (int d = 0; d < e[3]; ++d, ++t)
            fn(offset(g.L, wrap(a, e[0], g.L[0]), wrap(b, e[1], g.L[1]), wrap(c, e[2], g.L[2]),
                      wrap(d, e[3], g.L[3])), t);
  };
  each_tap([&](std::size_t pos, std::size_t t) { r[pos] = w[t]; });
  fftw_execute_dft_r2c(Plans::get(g.L).r2c, r, reinterpret_cast<fftw_complex*>(out));
  each_tap([&](std::size_t pos, std::size_t) { r[pos] = 0.0; });
}

/// Spectra of every channel block of a (c, n0, n1, n2, n3) tensor.
inline std::shared_ptr<const Spectra> forward_all(const Grid& g, const DenseTensor& x) {
  const std::size_t channels = x.dim(0);
  auto out = std::make_shared<Spectra>(channels, g.cplx_size());
  const std::size_t vol = g.signal_size();
  parallel_for(static_cast<std::ptrdiff_t>(channels), [&](std::ptrdiff_t c) {
    forward_into(g, x.data().data() + c * vol, (*out)[static_cast<std::size_t>(c)]);
  });
  return out;
}

}  // namespace fft

namespace detail {
struct SpectrumCache {
  std::mutex mu;
  fft::Grid grid;
  const void* owner = nullptr;
  std::uint64_t version = ~std::uint64_t{0};
  std::shared_ptr<const fft::Spectra> spectra;
};
}  // namespace detail

/// 4D kernel bank: weights (c_out * c_in, p_s, q_s, p_t, q_t) with row
/// (o * c_in + c), and bias (c_out).
class Kernel4D {
 public:
  Kernel4D() = default;
  Kernel4D(KernelShape shape, std::size_t c_in, std::size_t c_out, Variable weights, Variable bias)
      : shape_(shape), c_in_(c_in), c_out_(c_out), weights_(std::move(weights)), bias_(std::move(bias)),
        cache_(std::make_shared<detail::SpectrumCache>()) {
    if (!shape_.valid()) throw InvalidArgument("4D kernel extents must be odd, got " + shape_.str());
    const Shape ws{c_out * c_in, static_cast<std::size_t>(shape.ps), static_cast<std::size_t>(shape.qs),
                   static_cast<std::size_t>(shape.pt), static_cast<std::size_t>(shape.qt)};
    if (!(weights_.shape() == ws)) throw InvalidArgument("kernel weights must have shape " + ws.str());
    if (!(bias_.shape() == Shape{c_out})) throw InvalidArgument("kernel bias must have c_out entries");
  }

  static Kernel4D zeros(KernelShape shape, std::size_t c_in, std::size_t c_out, bool trainable = true) {
    if (!shape.valid()) throw InvalidArgument("4D kernel extents must be odd, got " + shape.str());
    return Kernel4D(shape, c_in, c_out,
                    Variable(DenseTensor(weight_shape(shape, c_in, c_out)), trainable),
                    Variable(DenseTensor(Shape{c_out}), trainable));
  }

  /// uniform(-a, a), a = 1/sqrt(c_in * taps); zero bias.
  static Kernel4D random(KernelShape shape, std::size_t c_in, std::size_t c_out, Rng& rng) {
    if (!shape.valid()) throw InvalidArgument("4D kernel extents must be odd, got " + shape.str());
    const double a = 1.0 / std::sqrt(static_cast<double>(c_in * shape.taps()));
    return Kernel4D(shape, c_in, c_out,
                    Variable(rng_fill(rng, weight_shape(shape, c_in, c_out), Uniform{-a, a}), true),
                    Variable(DenseTensor(Shape{c_out}), true));
  }

  /// Single center tap of weight 1 per matching channel, zero bias.
  static Kernel4D identity(KernelShape shape, std::size_t channels) {
    Kernel4D k = zeros(shape, channels, channels);
    auto& w = k.weights_.mutable_value();
    for (std::size_t c = 0; c < channels; ++c)
      w.at(c * channels + c, shape.ps / 2, shape.qs / 2, shape.pt / 2, shape.qt / 2) = 1.0;
    return k;
  }

  static Shape weight_shape(KernelShape s, std::size_t c_in, std::size_t c_out) {
    return Shape{c_out * c_in, static_cast<std::size_t>(s.ps), static_cast<std::size_t>(s.qs),
                 static_cast<std::size_t>(s.pt), static_cast<std::size_t>(s.qt)};
  }

  const KernelShape& shape() const { return shape_; }
  std::size_t c_in() const { return c_in_; }
  std::size_t c_out() const { return c_out_; }
  const Variable& weights() const { return weights_; }
  const Variable& bias() const { return bias_; }
  Variable& weights() { return weights_; }
  Variable& bias() { return bias_; }
  std::array<int, 4> radius() const { return {shape_.ps / 2, shape_.qs / 2, shape_.pt / 2, shape_.qt / 2}; }

  /// Spectra of all (o, c) kernels on grid g, recomputed when the weights
  /// change. The returned snapshot stays valid after later updates.
  std::shared_ptr<const fft::Spectra> spectra(const fft::Grid& g) const {
    std::lock_guard lock(cache_->mu);
    const void* owner = weights_.value().data().data();
    if (cache_->spectra && cache_->grid == g && cache_->owner == owner &&
        cache_->version == weights_.version())
      return cache_->spectra;
    auto s = std::make_shared<fft::Spectra>(c_out_ * c_in_, g.cplx_size());
    const double* w = weights_.value().data().data();
    const std::size_t taps = shape_.taps();
    const KernelShape ks = shape_;
    parallel_for(static_cast<std::ptrdiff_t>(c_out_ * c_in_), [&](std::ptrdiff_t oc) {
      fft::kernel_forward_into(g, w + oc * taps, ks, (*s)[static_cast<std::size_t>(oc)]);
    });
    cache_->grid = g;
    cache_->owner = owner;
    cache_->version = weights_.version();
    cache_->spectra = s;
    return s;
  }

 private:
  KernelShape shape_;
  std::size_t c_in_ = 0, c_out_ = 0;
  Variable weights_, bias_;
  std::shared_ptr<detail::SpectrumCache> cache_;
};

// ---------------------------------------------------------------------------
// Kernels. x is (c_in, hs, ws, ht, wt); outputs are (c_out, hs, ws, ht, wt).

namespace detail {

struct Dims4 {
  std::ptrdiff_t hs, ws, ht, wt;
  std::size_t volume() const { return static_cast<std::size_t>(hs * ws * ht * wt); }
};

inline Dims4 dims_of(const DenseTensor& x) {
  return {static_cast<std::ptrdiff_t>(x.dim(1)), static_cast<std::ptrdiff_t>(x.dim(2)),
          static_cast<std::ptrdiff_t>(x.dim(3)), static_cast<std::ptrdiff_t>(x.dim(4))};
}

inline void check_input(const DenseTensor& x, const Kernel4D& k) {
  if (x.rank() != 5) throw InvalidArgument("4D correlation input must be (c, hs, ws, ht, wt)");
  if (x.dim(0) != k.c_in())
    throw InvalidArgument("channel mismatch: input has " + std::to_string(x.dim(0)) +
                          ", kernel expects " + std::to_string(k.c_in()));
}

// Naive six-loop reference; accumulation runs over c, then the four tap axes.
inline void naive_forward(const DenseTensor& x, const DenseTensor& w, const DenseTensor& bias,
                          KernelShape ks, std::size_t c_in, std::size_t c_out, DenseTensor& out) {
  const Dims4 d = dims_of(x);
  const int rs = ks.ps / 2, rq = ks.qs / 2, rt = ks.pt / 2, rl = ks.qt / 2;
  const std::size_t vol = d.volume();
  parallel_for(static_cast<std::ptrdiff_t>(c_out) * d.hs, [&](std::ptrdiff_t oi) {
    const std::size_t o = static_cast<std::size_t>(oi / d.hs);
    const std::ptrdiff_t i = oi % d.hs;
    for (std::ptrdiff_t j = 0; j < d.ws; ++j)
      for (std::ptrdiff_t k = 0; k < d.ht; ++k)
        for (std::ptrdiff_t l = 0; l < d.wt; ++l) {
          double s = bias[o];
          for (std::size_t c = 0; c < c_in; ++c) {
            const double* wk = w.data().data() + (o * c_in + c) * ks.taps();
            const double* xc = x.data().data() + c * vol;
            for (int a = 0; a < ks.ps; ++a) {
              const std::ptrdiff_t ii = i + a - rs;
              if (ii < 0 || ii >= d.hs) continue;
              for (int b = 0; b < ks.qs; ++b) {
                const std::ptrdiff_t jj = j + b - rq;
                if (jj < 0 || jj >= d.ws) continue;
                for (int cc = 0; cc < ks.pt; ++cc) {
                  const std::ptrdiff_t kk = k + cc - rt;
                  if (kk < 0 || kk >= d.ht) continue;
                  for (int e = 0; e < ks.qt; ++e) {
                    const std::ptrdiff_t ll = l + e - rl;
                    if (ll < 0 || ll >= d.wt) continue;
                    s += wk[((a * ks.qs + b) * ks.pt + cc) * ks.qt + e] *
                         xc[((ii * d.ws + jj) * d.ht + kk) * d.wt + ll];
                  }
                }
              }
            }
          }
          out[o * vol + static_cast<std::size_t>(((i * d.ws + j) * d.ht + k) * d.wt + l)] = s;
        }
  });
}

/// Kernel with input/output channels swapped and every spatial axis
/// reversed; correlating with it is the adjoint of correlating with w.
inline DenseTensor flipped_transposed(const DenseTensor& w, KernelShape ks, std::size_t c_in,
                                      std::size_t c_out) {
  DenseTensor f(Kernel4D::weight_shape(ks, c_out, c_in));
  const std::size_t taps = ks.taps();
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t c = 0; c < c_in; ++c) {
      const double* src = w.data().data() + (o * c_in + c) * taps;
      double* dst = f.data().data() + (c * c_out + o) * taps;
      for (std::size_t t = 0; t < taps; ++t) dst[taps - 1 - t] = src[t];
    }
  return f;
}

inline void naive_weight_grad(const DenseTensor& g, const DenseTensor& x, KernelShape ks,
                              std::size_t c_in, std::size_t c_out, double* gw) {
  const Dims4 d = dims_of(x);
  const int rs = ks.ps / 2, rq = ks.qs / 2, rt = ks.pt / 2, rl = ks.qt / 2;
  const std::size_t vol = d.volume();
  const std::size_t taps = ks.taps();
  parallel_for(static_cast<std::ptrdiff_t>(c_out * c_in * taps), [&](std::ptrdiff_t idx) {
    const std::size_t oc = static_cast<std::size_t>(idx) / taps, t = static_cast<std::size_t>(idx) % taps;
    const std::size_t o = oc / c_in, c = oc % c_in;
    const int e = static_cast<int>(t % ks.qt);
    const int cc = static_cast<int>((t / ks.qt) % ks.pt);
    const int b = static_cast<int>((t / (ks.qt * ks.pt)) % ks.qs);
    const int a = static_cast<int>(t / (ks.qt * ks.pt * ks.qs));
    const double* go = g.data().data() + o * vol;
    const double* xc = x.data().data() + c * vol;
    double s = 0.0;
    for (std::ptrdiff_t i = 0; i < d.hs; ++i) {
      const std::ptrdiff_t ii = i + a - rs;
      if (ii < 0 || ii >= d.hs) continue;
      for (std::ptrdiff_t j = 0; j < d.ws; ++j) {
        const std::ptrdiff_t jj = j + b - rq;
        if (jj < 0 || jj >= d.ws) continue;
        for (std::ptrdiff_t k = 0; k < d.ht; ++k) {
          const std::ptrdiff_t kk = k + cc - rt;
          if (kk < 0 || kk >= d.ht) continue;
          for (std::ptrdiff_t l = 0; l < d.wt; ++l) {
            const std::ptrdiff_t ll = l + e - rl;
            if (ll < 0 || ll >= d.wt) continue;
            s += go[((i * d.ws + j) * d.ht + k) * d.wt + l] * xc[((ii * d.ws + jj) * d.ht + kk) * d.wt + ll];
          }
        }
      }
    }
    gw[idx] += s;
  });
}

// Fast path: every (c, i', j') target plane is zero-padded to
// (ht + 2 rt) x (wt + 2 rl) and stored with row stride Wp. An output plane
// computed in the same stride turns each (k, l) tap into one contiguous
// axpy over ht * Wp elements (columns >= wt are scratch and dropped), and
// each (i, j) output plane is the sum of p_s * q_s such shifted 2D passes.

struct PaddedPlanes {
  std::ptrdiff_t Hp = 0, Wp = 0, stride = 0;
  std::vector<double> buf;
};

inline PaddedPlanes pad_planes(const DenseTensor& x, KernelShape ks) {
  const Dims4 d = dims_of(x);
  const int rt = ks.pt / 2, rl = ks.qt / 2;
  PaddedPlanes p;
  p.Hp = d.ht + 2 * rt;
  p.Wp = d.wt + 2 * rl;
  p.stride = p.Hp * p.Wp + p.Wp;
  const std::size_t planes = x.dim(0) * static_cast<std::size_t>(d.hs * d.ws);
  p.buf.assign(planes * static_cast<std::size_t>(p.stride), 0.0);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* s = x.data().data() + pl * static_cast<std::size_t>(d.ht * d.wt);
    double* dst = p.buf.data() + pl * static_cast<std::size_t>(p.stride);
    for (std::ptrdiff_t k = 0; k < d.ht; ++k)
      std::copy_n(s + k * d.wt, d.wt, dst + (k + rt) * p.Wp + rl);
  }
  return p;
}

inline constexpr std::ptrdiff_t kChunk = 32;

inline void fast_forward(const DenseTensor& x, const DenseTensor& w, const DenseTensor* bias,
                         KernelShape ks, std::size_t c_in, std::size_t c_out, DenseTensor& out) {
  const Dims4 d = dims_of(x);
  const int rs = ks.ps / 2, rq = ks.qs / 2;
  const PaddedPlanes pp = pad_planes(x, ks);
  const std::ptrdiff_t N = d.ht * pp.Wp;
  const std::size_t taps = ks.taps();
  const std::size_t vol = d.volume();
  parallel_for(static_cast<std::ptrdiff_t>(c_out) * d.hs * d.ws, [&](std::ptrdiff_t pidx) {
    const std::size_t o = static_cast<std::size_t>(pidx / (d.hs * d.ws));
    const std::ptrdiff_t i = (pidx / d.ws) % d.hs, j = pidx % d.ws;
    thread_local std::vector<const double*> tp;
    thread_local std::vector<double> tw;
    thread_local std::vector<double> acc;
    tp.clear();
    tw.clear();
    acc.assign(static_cast<std::size_t>(N), 0.0);
    for (std::size_t c = 0; c < c_in; ++c) {
      const double* wk = w.data().data() + (o * c_in + c) * taps;
      for (int a = 0; a < ks.ps; ++a) {
        const std::ptrdiff_t ii = i + a - rs;
        if (ii < 0 || ii >= d.hs) continue;
        for (int b = 0; b < ks.qs; ++b) {
          const std::ptrdiff_t jj = j + b - rq;
          if (jj < 0 || jj >= d.ws) continue;
          const double* plane =
              pp.buf.data() + ((static_cast<std::ptrdiff_t>(c) * d.hs + ii) * d.ws + jj) * pp.stride;
          const double* wab = wk + (a * ks.qs + b) * ks.pt * ks.qt;
          for (int cc = 0; cc < ks.pt; ++cc)
            for (int e = 0; e < ks.qt; ++e) {
              tp.push_back(plane + cc * pp.Wp + e);
              tw.push_back(wab[cc * ks.qt + e]);
            }
        }
      }
    }
    const std::size_t T = tp.size();
    std::ptrdiff_t n0 = 0;
    for (; n0 + kChunk <= N; n0 += kChunk) {
      double r[kChunk] = {};
      for (std::size_t t = 0; t < T; ++t) {
        const double* s = tp[t] + n0;
        const double wv = tw[t];
        for (std::ptrdiff_t u = 0; u < kChunk; ++u) r[u] += wv * s[u];
      }
      std::copy_n(r, kChunk, acc.data() + n0);
    }
    for (; n0 < N; ++n0) {
      double r = 0.0;
      for (std::size_t t = 0; t < T; ++t) r += tw[t] * tp[t][n0];
      acc[static_cast<std::size_t>(n0)] = r;
    }
    const double b0 = bias ? (*bias)[o] : 0.0;
    double* dst = out.data().data() + o * vol + static_cast<std::size_t>((i * d.ws + j) * d.ht * d.wt);
    for (std::ptrdiff_t k = 0; k < d.ht; ++k)
      for (std::ptrdiff_t l = 0; l < d.wt; ++l) dst[k * d.wt + l] = b0 + acc[static_cast<std::size_t>(k * pp.Wp + l)];
  });
}

inline double dot_lanes(const double* a, const double* b, std::ptrdiff_t n) {
  double acc[8] = {};
  std::ptrdiff_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
  double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void fast_weight_grad(const DenseTensor& g, const DenseTensor& x, KernelShape ks,
                             std::size_t c_in, std::size_t c_out, double* gw) {
  const Dims4 d = dims_of(x);
  const int rs = ks.ps / 2, rq = ks.qs / 2;
  const PaddedPlanes xp = pad_planes(x, ks);
  const std::ptrdiff_t N = d.ht * xp.Wp;
  // gradient planes in the padded row stride, scratch columns zero
  const std::size_t gplanes = c_out * static_cast<std::size_t>(d.hs * d.ws);
  std::vector<double> gp(gplanes * static_cast<std::size_t>(N), 0.0);
  for (std::size_t pl = 0; pl < gplanes; ++pl)
    for (std::ptrdiff_t k = 0; k < d.ht; ++k)
      std::copy_n(g.data().data() + pl * static_cast<std::size_t>(d.ht * d.wt) + k * d.wt, d.wt,
                  gp.data() + pl * static_cast<std::size_t>(N) + k * xp.Wp);
  const std::size_t taps = ks.taps();
  const std::size_t tplane = static_cast<std::size_t>(ks.pt * ks.qt);
  parallel_for(static_cast<std::ptrdiff_t>(c_out * c_in) * ks.ps * ks.qs, [&](std::ptrdiff_t idx) {
    const std::ptrdiff_t ab = idx % (ks.ps * ks.qs);
    const std::size_t oc = static_cast<std::size_t>(idx / (ks.ps * ks.qs));
    const std::size_t o = oc / c_in, c = oc % c_in;
    const int a = static_cast<int>(ab / ks.qs), b = static_cast<int>(ab % ks.qs);
    std::vector<double> acc(tplane, 0.0);
    for (std::ptrdiff_t i = 0; i < d.hs; ++i) {
      const std::ptrdiff_t ii = i + a - rs;
      if (ii < 0 || ii >= d.hs) continue;
      for (std::ptrdiff_t j = 0; j < d.ws; ++j) {
        const std::ptrdiff_t jj = j + b - rq;
        if (jj < 0 || jj >= d.ws) continue;
        const double* gpl = gp.data() + ((static_cast<std::ptrdiff_t>(o) * d.hs + i) * d.ws + j) * N;
        const double* xpl =
            xp.buf.data() + ((static_cast<std::ptrdiff_t>(c) * d.hs + ii) * d.ws + jj) * xp.stride;
        for (int cc = 0; cc < ks.pt; ++cc)
          for (int e = 0; e < ks.qt; ++e)
            acc[static_cast<std::size_t>(cc * ks.qt + e)] += dot_lanes(gpl, xpl + cc * xp.Wp + e, N);
      }
    }
    double* dst = gw + oc * taps + static_cast<std::size_t>(ab) * tplane;
    for (std::size_t t = 0; t < tplane; ++t) dst[t] += acc[t];
  });
}

}  // namespace detail

/// Reference zero-padded 4D cross-correlation.
inline DenseTensor conv4d_naive(const DenseTensor& x, const Kernel4D& k) {
  detail::check_input(x, k);
  DenseTensor out(Shape{k.c_out(), x.dim(1), x.dim(2), x.dim(3), x.dim(4)});
  detail::naive_forward(x, k.weights().value(), k.bias().value(), k.shape(), k.c_in(), k.c_out(), out);
  return out;
}

/// Shifted-plane evaluation of the same correlation.
inline DenseTensor conv4d_fast(const DenseTensor& x, const Kernel4D& k) {
  detail::check_input(x, k);
  DenseTensor out(Shape{k.c_out(), x.dim(1), x.dim(2), x.dim(3), x.dim(4)});
  detail::fast_forward(x, k.weights().value(), &k.bias().value(), k.shape(), k.c_in(), k.c_out(), out);
  return out;
}

namespace detail {

inline fft::Grid grid_for(const DenseTensor& x, std::array<int, 4> radius) {
  return fft::Grid::for_signal({static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2)),
                                static_cast<int>(x.dim(3)), static_cast<int>(x.dim(4))},
                               radius);
}

/// out[o] += sum_c X[c] * conj(W[o, c]) transformed back, for o in [0, c_out).
inline void fft_apply(const fft::Grid& g, const fft::Spectra& X, const fft::Spectra& W,
                      std::size_t c_in, std::size_t c_out, double* out) {
  const std::size_t cs = g.cplx_size(), vol = g.signal_size();
  parallel_for(static_cast<std::ptrdiff_t>(c_out), [&](std::ptrdiff_t o) {
    fft::SpectrumSum acc(cs);
    for (std::size_t c = 0; c < c_in; ++c) acc.add(X[c], W[static_cast<std::size_t>(o) * c_in + c], true);
    fft::inverse_add(g, acc.get(), out + static_cast<std::size_t>(o) * vol);
  });
}

}  // namespace detail

/// Spectral evaluation of the same correlation.
inline DenseTensor conv4d_fft(const DenseTensor& x, const Kernel4D& k) {
  detail::check_input(x, k);
  const fft::Grid g = detail::grid_for(x, k.radius());
  const auto X = fft::forward_all(g, x);
  const auto W = k.spectra(g);
  DenseTensor out(Shape{k.c_out(), x.dim(1), x.dim(2), x.dim(3), x.dim(4)});
  detail::fft_apply(g, *X, *W, k.c_in(), k.c_out(), out.data().data());
  const std::size_t vol = g.signal_size();
  for (std::size_t o = 0; o < k.c_out(); ++o)
    for (std::size_t n = 0; n < vol; ++n) out[o * vol + n] += k.bias().value()[o];
  return out;
}

inline DenseTensor conv4d_eval(const DenseTensor& x, const Kernel4D& k, Conv4dAlgo algo) {
  switch (algo) {
    case Conv4dAlgo::naive: return conv4d_naive(x, k);
    case Conv4dAlgo::fast: return conv4d_fast(x, k);
    case Conv4dAlgo::fft: return conv4d_fft(x, k);
  }
  throw InvalidArgument("unknown algorithm");
}

/// Adjoint of the correlation w.r.t. its input: (c_in, ...) gradient from a
/// (c_out, ...) output gradient.
inline DenseTensor conv4d_input_grad(const DenseTensor& gout, const Kernel4D& k, Conv4dAlgo algo) {
  const DenseTensor flipped =
      detail::flipped_transposed(k.weights().value(), k.shape(), k.c_in(), k.c_out());
  DenseTensor gx(Shape{k.c_in(), gout.dim(1), gout.dim(2), gout.dim(3), gout.dim(4)});
  const DenseTensor zero_bias(Shape{k.c_in()});
  switch (algo) {
    case Conv4dAlgo::naive:
      detail::naive_forward(gout, flipped, zero_bias, k.shape(), k.c_out(), k.c_in(), gx);
      break;
    case Conv4dAlgo::fast:
      detail::fast_forward(gout, flipped, nullptr, k.shape(), k.c_out(), k.c_in(), gx);
      break;
    case Conv4dAlgo::fft: {
      const fft::Grid g = detail::grid_for(gout, k.radius());
      const auto G = fft::forward_all(g, gout);
      const auto W = k.spectra(g);
      const std::size_t cs = g.cplx_size(), vol = g.signal_size();
      parallel_for(static_cast<std::ptrdiff_t>(k.c_in()), [&](std::ptrdiff_t c) {
        fft::SpectrumSum acc(cs);
        for (std::size_t o = 0; o < k.c_out(); ++o) acc.add((*G)[o], (*W)[o * k.c_in() + static_cast<std::size_t>(c)], false);
        fft::inverse_add(g, acc.get(), gx.data().data() + static_cast<std::size_t>(c) * vol);
      });
      break;
    }
  }
  return gx;
}

/// d(loss)/d(weights) in the weight layout, from the output gradient and input.
inline DenseTensor conv4d_weight_grad(const DenseTensor& gout, const DenseTensor& x, const Kernel4D& k,
                                      Conv4dAlgo algo) {
  DenseTensor gw(Kernel4D::weight_shape(k.shape(), k.c_in(), k.c_out()));
  switch (algo) {
    case Conv4dAlgo::naive:
      detail::naive_weight_grad(gout, x, k.shape(), k.c_in(), k.c_out(), gw.data().data());
      break;
    case Conv4dAlgo::fast:
      detail::fast_weight_grad(gout, x, k.shape(), k.c_in(), k.c_out(), gw.data().data());
      break;
    case Conv4dAlgo::fft: {
      const fft::Grid g = detail::grid_for(x, k.radius());
      const auto X = fft::forward_all(g, x);
      const auto G = fft::forward_all(g, gout);
      const std::size_t cs = g.cplx_size(), taps = k.shape().taps();
      const KernelShape ks = k.shape();
      parallel_for(static_cast<std::ptrdiff_t>(k.c_out() * k.c_in()), [&](std::ptrdiff_t oc) {
        const std::size_t o = static_cast<std::size_t>(oc) / k.c_in(), c = static_cast<std::size_t>(oc) % k.c_in();
        fft::cplx* prod = fft::scratch::spectrum(cs, false);
        fft::conj_mul(prod, (*G)[o], (*X)[c], cs);
        fft::inverse_kernel_add(g, prod, ks, gw.data().data() + static_cast<std::size_t>(oc) * taps);
      });
      break;
    }
  }
  return gw;
}

// ---------------------------------------------------------------------------
// Layers

/// One layer of the consensus stack: every branch reads the same input;
/// branch outputs are channel-concatenated (or summed), then optionally
/// rectified.
struct AncLayer {
  std::vector<Kernel4D> branches;
  bool sum_branches = false;
  bool relu = true;

  std::size_t c_in() const { return branches.front().c_in(); }
  std::size_t c_out() const {
    if (sum_branches) return branches.front().c_out();
    std::size_t s = 0;
    for (const auto& b : branches) s += b.c_out();
    return s;
  }
  std::array<int, 4> radius() const {
    std::array<int, 4> r{};
    for (const auto& b : branches)
      for (int a = 0; a < 4; ++a) r[a] = std::max(r[a], b.radius()[a]);
    return r;
  }
};

namespace ops {

/// One consensus layer applied to `batch` independent maps stacked along
/// the channel axis: input (batch * c_in, ...), output (batch * c_out, ...).
/// Batching lets the spectral path sum weight gradients over the maps
/// before a single inverse transform.
inline Variable anc_layer(Tape& tape, const Variable& x, const AncLayer& layer, Conv4dAlgo algo,
                          std::size_t batch = 1) {
  if (layer.branches.empty()) throw InvalidArgument("layer has no branches");
  if (batch == 0) throw InvalidArgument("batch must be >= 1");
  const DenseTensor& xv = x.value();
  if (xv.rank() != 5) throw InvalidArgument("4D correlation input must be (c, hs, ws, ht, wt)");
  if (xv.dim(0) != batch * layer.c_in())
    throw InvalidArgument("channel mismatch: input has " + std::to_string(xv.dim(0)) + ", layer expects " +
                          std::to_string(batch) + " x " + std::to_string(layer.c_in()));
  for (const auto& b : layer.branches)
    if (b.c_in() != layer.c_in()) throw InvalidArgument("branches disagree on input channels");
  if (layer.sum_branches)
    for (const auto& b : layer.branches)
      if (b.c_out() != layer.branches.front().c_out())
        throw InvalidArgument("summed branches must have equal output channels");
  const std::size_t vol = xv.size() / xv.dim(0);
  const std::size_t ci = layer.c_in(), co = layer.c_out();
  const Shape sp{1, xv.dim(1), xv.dim(2), xv.dim(3), xv.dim(4)};
  auto block = [&](const DenseTensor& t, std::size_t first, std::size_t count) {
    std::vector<double> part(t.data().begin() + first * vol, t.data().begin() + (first + count) * vol);
    return DenseTensor(Shape{count, sp[1], sp[2], sp[3], sp[4]}, std::move(part));
  };
  // First output channel of each branch within one map's c_out block.
  std::vector<std::size_t> first_out;
  {
    std::size_t c0 = 0;
    for (const auto& br : layer.branches) {
      first_out.push_back(c0);
      if (!layer.sum_branches) c0 += br.c_out();
    }
  }

  DenseTensor pre(Shape{batch * co, sp[1], sp[2], sp[3], sp[4]});
  fft::Grid grid;
  std::shared_ptr<const fft::Spectra> X;
  if (algo == Conv4dAlgo::fft) {
    grid = detail::grid_for(xv, layer.radius());
    X = fft::forward_all(grid, xv);
    std::vector<std::shared_ptr<const fft::Spectra>> Ws;
    for (const auto& br : layer.branches) Ws.push_back(br.spectra(grid));
    const std::size_t cs = grid.cplx_size();
    // One inverse transform per output channel; summed branches meet in
    // the frequency domain.
    parallel_for(static_cast<std::ptrdiff_t>(batch * co), [&](std::ptrdiff_t qi) {
      const auto q = static_cast<std::size_t>(qi) % co, m = static_cast<std::size_t>(qi) / co;
      fft::SpectrumSum acc(cs);
      double bias = 0.0;
      for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
        const auto& br = layer.branches[bi];
        if (q < first_out[bi] || q >= first_out[bi] + br.c_out()) continue;
        const std::size_t o = q - first_out[bi];
        for (std::size_t c = 0; c < ci; ++c) acc.add((*X)[m * ci + c], (*Ws[bi])[o * ci + c], true);
        bias += br.bias().value()[o];
      }
      double* dst = pre.data().data() + static_cast<std::size_t>(qi) * vol;
      fft::inverse_add(grid, acc.get(), dst);
      for (std::size_t n = 0; n < vol; ++n) dst[n] += bias;
    });
  } else {
    for (std::size_t m = 0; m < batch; ++m) {
      const DenseTensor xm = batch == 1 ? DenseTensor() : block(xv, m * ci, ci);
      const DenseTensor& in = batch == 1 ? xv : xm;
      for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
        const auto& br = layer.branches[bi];
        DenseTensor ob(Shape{br.c_out(), sp[1], sp[2], sp[3], sp[4]});
        if (algo == Conv4dAlgo::naive)
          detail::naive_forward(in, br.weights().value(), br.bias().value(), br.shape(), ci, br.c_out(), ob);
        else
          detail::fast_forward(in, br.weights().value(), &br.bias().value(), br.shape(), ci, br.c_out(), ob);
        double* dst = pre.data().data() + (m * co + first_out[bi]) * vol;
        for (std::size_t n = 0; n < ob.size(); ++n) dst[n] += ob[n];
      }
    }
  }

  DenseTensor out = pre;
  if (layer.relu) {
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    if (tape.tracking_branches())
      tape.note_branch(mask_hash(pre.data(), [](double v) { return v > 0.0; }));
  }

  std::vector<Variable> inputs{x};
  for (const auto& b : layer.branches) {
    inputs.push_back(b.weights());
    inputs.push_back(b.bias());
  }
  const bool rec = tape.enabled() && std::any_of(inputs.begin(), inputs.end(),
                                                 [](const Variable& v) { return v.requires_grad(); });
  if (!rec) return tape.record(std::move(out), std::move(inputs), {});

  DenseTensor mask_src = layer.relu ? std::move(pre) : DenseTensor();
  return tape.record(
      std::move(out), std::move(inputs),
      [x, layer, algo, batch, grid, X, vol, first_out, mask = std::move(mask_src)](const DenseTensor& gout) {
        DenseTensor g = gout;
        if (layer.relu)
          for (std::size_t n = 0; n < g.size(); ++n)
            if (!(mask[n] > 0.0)) g[n] = 0.0;
        const DenseTensor& xv = x.value();
        const std::size_t ci = layer.c_in(), co = layer.c_out();
        const Shape sp{1, xv.dim(1), xv.dim(2), xv.dim(3), xv.dim(4)};
        // Gradient rows of branch bi for every map, stacked (batch * c_out_b, ...).
        auto branch_grad = [&](std::size_t bi) {
          const std::size_t cb = layer.branches[bi].c_out();
          DenseTensor t(Shape{batch * cb, sp[1], sp[2], sp[3], sp[4]});
          for (std::size_t m = 0; m < batch; ++m)
            std::copy_n(g.data().begin() + (m * co + first_out[bi]) * vol, cb * vol,
                        t.data().begin() + m * cb * vol);
          return t;
        };

        for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
          const auto& br = layer.branches[bi];
          if (!br.bias().requires_grad()) continue;
          auto gb = br.bias().grad().data();
          for (std::size_t o = 0; o < br.c_out(); ++o) {
            double s = 0.0;
            for (std::size_t m = 0; m < batch; ++m) {
              const double* row = g.data().data() + (m * co + first_out[bi] + o) * vol;
              for (std::size_t n = 0; n < vol; ++n) s += row[n];
            }
            gb[o] += s;
          }
        }

        if (algo == Conv4dAlgo::fft) {
          const std::size_t cs = grid.cplx_size();
          std::vector<std::shared_ptr<const fft::Spectra>> Gs, Ws;
          for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
            if (layer.sum_branches && !Gs.empty())
              Gs.push_back(Gs.front());
            else
              Gs.push_back(fft::forward_all(grid, branch_grad(bi)));
            Ws.push_back(layer.branches[bi].spectra(grid));
          }
          for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
            const auto& br = layer.branches[bi];
            if (!br.weights().requires_grad()) continue;
            double* gw = br.weights().grad().data().data();
            const std::size_t taps = br.shape().taps(), cb = br.c_out();
            const auto& G = *Gs[bi];
            const KernelShape ks = br.shape();
            parallel_for(static_cast<std::ptrdiff_t>(cb * ci), [&](std::ptrdiff_t oc) {
              const std::size_t o = static_cast<std::size_t>(oc) / ci, c = static_cast<std::size_t>(oc) % ci;
              fft::SpectrumSum prod(cs);
              for (std::size_t m = 0; m < batch; ++m) prod.add((*X)[m * ci + c], G[m * cb + o], true);
              fft::inverse_kernel_add(grid, prod.get(), ks, gw + static_cast<std::size_t>(oc) * taps);
            });
          }
          if (x.requires_grad()) {
            double* gx = x.grad().data().data();
            parallel_for(static_cast<std::ptrdiff_t>(batch * ci), [&](std::ptrdiff_t mc) {
              const std::size_t m = static_cast<std::size_t>(mc) / ci, c = static_cast<std::size_t>(mc) % ci;
              fft::SpectrumSum acc(cs);
              for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
                const auto& br = layer.branches[bi];
                const std::size_t cb = br.c_out();
                for (std::size_t o = 0; o < cb; ++o) acc.add((*Gs[bi])[m * cb + o], (*Ws[bi])[o * ci + c], false);
              }
              fft::inverse_add(grid, acc.get(), gx + static_cast<std::size_t>(mc) * vol);
            });
          }
          return;
        }

        for (std::size_t bi = 0; bi < layer.branches.size(); ++bi) {
          const auto& br = layer.branches[bi];
          const std::size_t cb = br.c_out();
          const DenseTensor gb_all = branch_grad(bi);
          for (std::size_t m = 0; m < batch; ++m) {
            const DenseTensor gm(Shape{cb, sp[1], sp[2], sp[3], sp[4]},
                                 std::vector<double>(gb_all.data().begin() + m * cb * vol,
                                                     gb_all.data().begin() + (m + 1) * cb * vol));
            const DenseTensor xm(Shape{ci, sp[1], sp[2], sp[3], sp[4]},
                                 std::vector<double>(xv.data().begin() + m * ci * vol,
                                                     xv.data().begin() + (m + 1) * ci * vol));
            if (br.weights().requires_grad())
              accumulate(br.weights().grad(), conv4d_weight_grad(gm, xm, br, algo).data());
            if (x.requires_grad()) {
              const DenseTensor gin = conv4d_input_grad(gm, br, algo);
              auto gx = x.grad().data().subspan(m * ci * vol, ci * vol);
              for (std::size_t n = 0; n < gin.size(); ++n) gx[n] += gin[n];
            }
          }
        }
      });
}

/// Single-kernel correlation without rectification.
inline Variable conv4d(Tape& tape, const Variable& x, const Kernel4D& k, Conv4dAlgo algo) {
  return anc_layer(tape, x, AncLayer{{k}, false, false}, algo);
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Consensus module configuration

enum class AncVariant { a, b, c, d };

inline AncVariant parse_variant(const std::string& s) {
  if (s == "a") return AncVariant::a;
  if (s == "b") return AncVariant::b;
  if (s == "c") return AncVariant::c;
  if (s == "d") return AncVariant::d;
  throw InvalidArgument("unknown ANC variant '" + s + "' (expected a, b, c or d)");
}

inline std::string variant_name(AncVariant v) {
  return std::string(1, static_cast<char>('a' + static_cast<int>(v)));
}

struct BranchSpec {
  KernelShape shape;
  std::size_t c_out;
};

struct LayerSpec {
  std::size_t c_in;
  std::vector<BranchSpec> branches;
  bool sum_branches;
  bool relu;
};

inline constexpr KernelShape kIsotropic5 = {5, 5, 5, 5};
inline constexpr KernelShape kNonIsotropic3355 = {3, 3, 5, 5};

struct AncConfig {
  AncVariant variant = AncVariant::d;
  std::vector<std::size_t> channels{1, 16, 16, 1};

  void validate() const {
    if (channels.size() < 2) throw InvalidArgument("channel plan needs at least two entries");
    if (channels.front() != 1 || channels.back() != 1)
      throw InvalidArgument("channel plan must start and end with 1");
    for (auto c : channels)
      if (c == 0) throw InvalidArgument("channel plan entries must be positive");
    if (variant == AncVariant::d)
      for (std::size_t i = 1; i + 1 < channels.size(); ++i)
        if (channels[i] < 2) throw InvalidArgument("variant d needs >= 2 channels per hidden layer");
  }

  /// (a): isotropic 5^4 everywhere. (b): isotropic outer layers, 3x3x5x5 on
  /// the interior layers. (c): 3x3x5x5 everywhere. (d): every layer has an
  /// isotropic and a 3x3x5x5 branch, each producing half the channels; a
  /// single-channel layer sums the two instead.
  std::vector<LayerSpec> layers() const {
    validate();
    std::vector<LayerSpec> out;
    const std::size_t n = channels.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ci = channels[i], co = channels[i + 1];
      const bool last = i + 1 == n;
      LayerSpec l{ci, {}, false, !last};
      switch (variant) {
        case AncVariant::a:
          l.branches = {{kIsotropic5, co}};
          break;
        case AncVariant::b:
          l.branches = {{(i == 0 || last) ? kIsotropic5 : kNonIsotropic3355, co}};
          break;
        case AncVariant::c:
          l.branches = {{kNonIsotropic3355, co}};
          break;
        case AncVariant::d:
          if (co == 1) {
            l.branches = {{kIsotropic5, 1}, {kNonIsotropic3355, 1}};
            l.sum_branches = true;
          } else {
            l.branches = {{kIsotropic5, co - co / 2}, {kNonIsotropic3355, co / 2}};
          }
          break;
      }
      out.push_back(std::move(l));
    }
    return out;
  }
};

inline std::string channels_to_string(const std::vector<std::size_t>& ch) {
  std::string s;
  for (std::size_t i = 0; i < ch.size(); ++i) s += (i ? "," : "") + std::to_string(ch[i]);
  return s;
}

struct AncParams {
  std::vector<AncLayer> layers;

  static AncParams init(const AncConfig& cfg, Rng& rng) {
    AncParams p;
    for (const auto& spec : cfg.layers()) {
      AncLayer l;
      l.sum_branches = spec.sum_branches;
      l.relu = spec.relu;
      for (const auto& b : spec.branches) {
        Kernel4D k = Kernel4D::random(b.shape, spec.c_in, b.c_out, rng);
        // no ReLU on the output layer: mixed-sign taps can start it
        // anti-correlated, and training does not recover from that
        if (!spec.relu)
          for (auto& w : k.weights().mutable_value().data()) w = std::abs(w);
        l.branches.push_back(std::move(k));
      }
      p.layers.push_back(std::move(l));
    }
    return p;
  }

  static AncParams zeros(const AncConfig& cfg) {
    AncParams p;
    for (const auto& spec : cfg.layers()) {
      AncLayer l;
      l.sum_branches = spec.sum_branches;
      l.relu = spec.relu;
      for (const auto& b : spec.branches) l.branches.push_back(Kernel4D::zeros(b.shape, spec.c_in, b.c_out));
      p.layers.push_back(std::move(l));
    }
    return p;
  }

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (std::size_t b = 0; b < layers[i].branches.size(); ++b) {
        const std::string stem = "anc.l" + std::to_string(i) + ".b" + std::to_string(b);
        out.push_back({stem + ".w", layers[i].branches[b].weights()});
        out.push_back({stem + ".bias", layers[i].branches[b].bias()});
      }
    return out;
  }

  void check(const AncConfig& cfg) const {
    const auto specs = cfg.layers();
    if (specs.size() != layers.size()) throw InvalidArgument("ANC parameters have the wrong layer count");
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& s = specs[i];
      const auto& l = layers[i];
      if (s.branches.size() != l.branches.size() || s.sum_branches != l.sum_branches || s.relu != l.relu)
        throw InvalidArgument("ANC layer " + std::to_string(i) + " does not match the configuration");
      for (std::size_t b = 0; b < s.branches.size(); ++b) {
        const auto& k = l.branches[b];
        if (!(k.shape() == s.branches[b].shape) || k.c_in() != s.c_in || k.c_out() != s.branches[b].c_out)
          throw InvalidArgument("ANC layer " + std::to_string(i) + " branch " + std::to_string(b) +
                                " does not match the configuration");
      }
    }
  }
};

inline const std::vector<std::size_t> kTransposeOrder{0, 3, 4, 1, 2};

/// Applies the consensus stack to each (1, hs, ws, ht, wt) map. Maps of
/// equal shape run as one batch; results come back in input order.
inline std::vector<Variable> anc_forward_batch(Tape& tape, const std::vector<Variable>& maps, const AncConfig& cfg,
                                               const AncParams& params, Conv4dAlgo algo = Conv4dAlgo::fft) {
  params.check(cfg);
  if (maps.empty()) throw InvalidArgument("no maps to refine");
  for (const auto& x : maps)
    if (x.value().rank() != 5 || x.value().dim(0) != 1)
      throw InvalidArgument("consensus input must be a single-channel 4D map");
  std::vector<Variable> out(maps.size());
  std::vector<bool> done(maps.size(), false);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (done[i]) continue;
    std::vector<std::size_t> group;
    for (std::size_t j = i; j < maps.size(); ++j)
      if (!done[j] && maps[j].shape() == maps[i].shape()) {
        group.push_back(j);
        done[j] = true;
      }
    std::vector<Variable> parts;
    for (auto j : group) parts.push_back(maps[j]);
    Variable h = parts.size() == 1 ? parts.front() : ops::concat_first(tape, parts);
    for (const auto& l : params.layers) h = ops::anc_layer(tape, h, l, algo, parts.size());
    for (std::size_t k = 0; k < group.size(); ++k)
      out[group[k]] = group.size() == 1 ? h : ops::slice_first(tape, h, k, 1);
  }
  return out;
}

inline Variable anc_forward(Tape& tape, const Variable& x, const AncConfig& cfg, const AncParams& params,
                            Conv4dAlgo algo = Conv4dAlgo::fft) {
  return anc_forward_batch(tape, {x}, cfg, params, algo).front();
}

/// N(C) + N(C^T)^T, with C^T swapping the source and target axes.
inline Variable anc_both_directions(Tape& tape, const Variable& c, const AncConfig& cfg,
                                    const AncParams& params, Conv4dAlgo algo) {
  const auto r = anc_forward_batch(tape, {c, ops::permute(tape, c, kTransposeOrder)}, cfg, params, algo);
  return ops::add(tape, r[0], ops::permute(tape, r[1], kTransposeOrder));
}

/// C_bar = (N(Cs) + N(Cs^T)^T) + (N(Cf) + N(Cf^T)^T). Each bracket is a
/// commutative pair of sums, so swapping the images transposes the result
/// bit-for-bit. All four maps share one batched pass.
inline Variable bidirectional_refine(Tape& tape, const Variable& cs, const Variable& cf, const AncConfig& cfg,
                                     const AncParams& params, Conv4dAlgo algo = Conv4dAlgo::fft) {
  if (!(cs.shape() == cf.shape())) throw InvalidArgument("C_s and C_f dimensions differ");
  const auto r = anc_forward_batch(
      tape, {cs, ops::permute(tape, cs, kTransposeOrder), cf, ops::permute(tape, cf, kTransposeOrder)}, cfg,
      params, algo);
  const Variable s = ops::add(tape, r[0], ops::permute(tape, r[1], kTransposeOrder));
  const Variable f = ops::add(tape, r[2], ops::permute(tape, r[3], kTransposeOrder));
  return ops::add(tape, s, f);
}

}  // namespace anc
