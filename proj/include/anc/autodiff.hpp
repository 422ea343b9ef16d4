#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "anc/errors.hpp"
#include "anc/rng.hpp"
#include "anc/tensor.hpp"

namespace anc {

namespace detail {
struct VarState {
  DenseTensor value;
  DenseTensor grad;
  bool requires_grad = false;
  std::uint64_t version = 0;
};
}  // namespace detail

/// Shared handle to a value and its accumulated gradient. Copies alias the
/// same state, so parameters can be handed to ops and optimizers freely.
class Variable {
 public:
  Variable() = default;
  explicit Variable(DenseTensor value, bool requires_grad = false)
      : s_(std::make_shared<detail::VarState>()) {
    s_->value = std::move(value);
    s_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const DenseTensor& value() const { return s_->value; }
  const Shape& shape() const { return s_->value.shape(); }

  /// Write access to the value; bumps the version so cached derived data
  /// (kernel spectra) is invalidated.
  DenseTensor& mutable_value() {
    ++s_->version;
    return s_->value;
  }
  std::uint64_t version() const { return s_->version; }

  bool requires_grad() const { return s_->requires_grad; }
  bool has_grad() const { return !s_->grad.empty(); }

  /// Gradient buffer, zero-filled on first access.
  DenseTensor& grad() const {
    if (s_->grad.empty()) s_->grad = DenseTensor(s_->value.shape());
    return s_->grad;
  }

  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.data().begin(), s_->grad.data().end(), 0.0);
  }
  void release_grad() { s_->grad = DenseTensor(); }

  bool is(const Variable& o) const { return s_ == o.s_; }

 private:
  std::shared_ptr<detail::VarState> s_;
};

inline void accumulate(DenseTensor& dst, std::span<const double> src) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

/// Define-by-run record of op applications. Each node keeps its inputs, its
/// output and a closure over the intermediates its backward rule needs.
class Tape {
 public:
  using BackwardFn = std::function<void(const DenseTensor& grad_out)>;

  explicit Tape(bool enabled = true, bool track_branches = false)
      : enabled_(enabled), track_branches_(track_branches) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }

  static bool any_requires_grad(std::initializer_list<Variable> inputs) {
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Variable& v) { return v.defined() && v.requires_grad(); });
  }

  /// Whether an op with these inputs will be recorded; ops use this to skip
  /// saving intermediates.
  bool recording(std::initializer_list<Variable> inputs) const {
    return enabled_ && any_requires_grad(inputs);
  }

  Variable record(DenseTensor value, std::vector<Variable> inputs, BackwardFn fn) {
    const bool rg = enabled_ && std::any_of(inputs.begin(), inputs.end(), [](const Variable& v) {
                      return v.defined() && v.requires_grad();
                    });
    Variable out(std::move(value), rg);
    if (rg) nodes_.push_back({std::move(inputs), out, std::move(fn)});
    return out;
  }

  /// Propagates d(loss)/d(.) to every reachable requires_grad variable.
  /// Gradients accumulate into existing buffers; a tape can be consumed once.
  void backward(const Variable& loss) {
    if (consumed_) throw InvalidArgument("backward called twice on the same tape");
    if (!loss.defined() || loss.value().size() != 1)
      throw InvalidArgument("backward requires a scalar loss");
    std::ptrdiff_t root = -1;
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(nodes_.size()) - 1; i >= 0; --i)
      if (nodes_[i].output.is(loss)) {
        root = i;
        break;
      }
    if (root < 0) throw InvalidArgument("loss was not produced on this tape");
    consumed_ = true;
    loss.grad()[0] += 1.0;
    for (std::ptrdiff_t i = root; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.output.has_grad()) continue;
      n.fn(n.output.grad());
      // intermediates are not needed once their consumers ran
      n.output.release_grad();
      n.fn = nullptr;
    }
  }

  bool tracking_branches() const { return track_branches_; }

  /// Folds a hash of a discrete branch decision (ReLU mask, max position)
  /// into the tape's branch signature.
  void note_branch(std::uint64_t h) {
    signature_ = (signature_ ^ h) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL;
  }
  std::uint64_t branch_signature() const { return signature_; }

 private:
  struct Node {
    std::vector<Variable> inputs;
    Variable output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  bool enabled_;
  bool track_branches_;
  bool consumed_ = false;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

/// FNV-1a over a predicate mask, for Tape::note_branch.
template <typename Pred>
std::uint64_t mask_hash(std::span<const double> v, Pred&& pred) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    word = (word << 1) | (pred(v[i]) ? 1u : 0u);
    if ((i & 63) == 63) {
      h = (h ^ word) * 0x100000001b3ULL;
      word = 0;
    }
  }
  return (h ^ word ^ v.size()) * 0x100000001b3ULL;
}

inline std::uint64_t index_hash(std::span<const std::size_t> idx) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto i : idx) h = (h ^ i) * 0x100000001b3ULL;
  return h;
}

// ---------------------------------------------------------------------------
// Generic ops

namespace ops {

inline Variable sum(Tape& tape, const Variable& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape.record(DenseTensor(Shape{1}, {s}), {x}, [x](const DenseTensor& g) {
    if (!x.requires_grad()) return;
    const double gv = g[0];
    for (auto& v : x.grad().data()) v += gv;
  });
}

inline Variable add(Tape& tape, const Variable& a, const Variable& b) {
  if (!(a.shape() == b.shape())) throw InvalidArgument("add: shape mismatch");
  DenseTensor out = a.value();
  accumulate(out, b.value().data());
  return tape.record(std::move(out), {a, b}, [a, b](const DenseTensor& g) {
    if (a.requires_grad()) accumulate(a.grad(), g.data());
    if (b.requires_grad()) accumulate(b.grad(), g.data());
  });
}

inline Variable scale(Tape& tape, const Variable& x, double s) {
  DenseTensor out = x.value();
  for (auto& v : out.data()) v *= s;
  return tape.record(std::move(out), {x}, [x, s](const DenseTensor& g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad().data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * g[i];
  });
}

/// Elementwise product.
inline Variable mul(Tape& tape, const Variable& a, const Variable& b) {
  if (!(a.shape() == b.shape())) throw InvalidArgument("mul: shape mismatch");
  DenseTensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.record(std::move(out), {a, b}, [a, b](const DenseTensor& g) {
    if (a.requires_grad()) {
      auto ga = a.grad().data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad().data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

/// ReLU with derivative 0 at 0.
inline Variable relu(Tape& tape, const Variable& x) {
  DenseTensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  if (tape.tracking_branches())
    tape.note_branch(mask_hash(x.value().data(), [](double v) { return v > 0.0; }));
  return tape.record(std::move(out), {x}, [x](const DenseTensor& g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad().data();
    const auto xv = x.value().data();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

inline Variable permute(Tape& tape, const Variable& x, std::vector<std::size_t> order) {
  DenseTensor out = anc::permute(x.value(), order);
  return tape.record(std::move(out), {x}, [x, order](const DenseTensor& g) {
    if (!x.requires_grad()) return;
    const auto inv = inverse_order(order);
    accumulate(x.grad(), anc::permute(g, inv).data());
  });
}

/// Concatenation along the first axis; all other extents must agree.
inline Variable concat_first(Tape& tape, const std::vector<Variable>& parts) {
  if (parts.empty()) throw InvalidArgument("concat of nothing");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.rank() != out_shape.rank()) throw InvalidArgument("concat: rank mismatch");
    for (std::size_t a = 1; a < s.rank(); ++a)
      if (s[a] != out_shape[a]) throw InvalidArgument("concat: extent mismatch");
    total += s[0];
  }
  out_shape[0] = total;
  DenseTensor out(out_shape);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + at);
    at += p.value().size();
  }
  return tape.record(std::move(out), parts, [parts](const DenseTensor& g) {
    std::size_t at = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.value().size();
      if (p.requires_grad()) {
        auto gp = p.grad().data();
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[at + i];
      }
      at += n;
    }
  });
}

/// Rows [begin, begin + count) of the first axis.
inline Variable slice_first(Tape& tape, const Variable& x, std::size_t begin, std::size_t count) {
  Shape s = x.shape();
  if (s.rank() == 0 || begin + count > s[0]) throw InvalidArgument("slice out of range");
  const std::size_t row = s.volume() / s[0];
  s[0] = count;
  DenseTensor out(s);
  std::copy_n(x.value().data().begin() + begin * row, count * row, out.data().begin());
  return tape.record(std::move(out), {x}, [x, begin, row](const DenseTensor& g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad().data().subspan(begin * row, g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Concatenation along the last axis; all other extents must agree.
inline Variable concat_last(Tape& tape, const std::vector<Variable>& parts) {
  if (parts.empty()) throw InvalidArgument("concat of nothing");
  const Shape base = parts[0].shape();
  const std::size_t r = base.rank();
  std::size_t rows = base.volume() / base[r - 1];
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.rank() != r) throw InvalidArgument("concat: rank mismatch");
    for (std::size_t a = 0; a + 1 < r; ++a)
      if (s[a] != base[a]) throw InvalidArgument("concat: extent mismatch");
    total += s[r - 1];
  }
  Shape out_shape = base;
  out_shape[r - 1] = total;
  DenseTensor out(out_shape);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[r - 1];
    for (std::size_t row = 0; row < rows; ++row)
      std::copy_n(p.value().data().begin() + row * w, w, out.data().begin() + row * total + col0);
    col0 += w;
  }
  return tape.record(std::move(out), parts, [parts, rows, total](const DenseTensor& g) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.shape()[p.shape().rank() - 1];
      if (p.requires_grad()) {
        auto gp = p.grad().data();
        for (std::size_t row = 0; row < rows; ++row)
          for (std::size_t c = 0; c < w; ++c) gp[row * w + c] += g[row * total + c0 + c];
      }
      c0 += w;
    }
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference gradient checker

struct NamedParam {
  std::string name;
  Variable var;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::size_t skipped_kinks = 0;
  double loss = 0.0;  // at the unperturbed point
  double step = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  bool passed(double tolerance) const { return !entries.empty() && max_rel_error() <= tolerance; }

  /// Absolute error a central difference picks up from rounding alone, with
  /// each loss evaluation good to two ulps. Gradients much smaller than this
  /// cannot be resolved at the chosen step.
  double roundoff_floor() const {
    return 4.0 * std::numeric_limits<double>::epsilon() * std::abs(loss) / (2.0 * step);
  }
  std::size_t within(double tolerance) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.rel_error <= tolerance; }));
  }
  /// Entries off by more than both the tolerance and the rounding floor.
  std::size_t failures(double tolerance) const {
    const double floor = roundoff_floor();
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const auto& e) {
      return e.rel_error > tolerance && std::abs(e.analytic - e.numeric) > floor;
    }));
  }
};

struct GradCheckOptions {
  double step = 1e-6;
  /// 0 checks every scalar parameter.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients of `loss_fn` with central differences.
/// Samples whose +/- evaluations take a different discrete branch (ReLU
/// mask or max position) than the base point sit on a kink; they are
/// skipped and counted, and another sample is drawn in their place.
inline GradCheckReport grad_check(const std::function<Variable(Tape&)>& loss_fn,
                                  std::vector<NamedParam> params,
                                  const GradCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw InvalidArgument("grad_check step must be positive");
  for (auto& p : params) p.var.zero_grad();

  Tape tape(true, true);
  const Variable loss = loss_fn(tape);
  if (!std::isfinite(loss.value()[0])) throw NumericError("loss is not finite");
  const std::uint64_t base_sig = tape.branch_signature();
  tape.backward(loss);

  std::vector<std::pair<std::size_t, std::size_t>> all;  // (param, flat index)
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].var.value().size(); ++i) all.emplace_back(p, i);

  Rng rng(opts.seed, 0x6772616463686bULL);
  // Fisher-Yates gives a without-replacement sampling order
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
  const std::size_t want = opts.samples == 0 ? all.size() : std::min(opts.samples, all.size());

  auto eval = [&](std::uint64_t& sig) {
    Tape t(false, true);
    const double v = loss_fn(t).value()[0];
    if (!std::isfinite(v)) throw NumericError("loss is not finite at a perturbed point");
    sig = t.branch_signature();
    return v;
  };

  GradCheckReport report;
  report.loss = loss.value()[0];
  report.step = opts.step;
  for (std::size_t k = 0; k < all.size() && report.entries.size() < want; ++k) {
    auto [p, i] = all[k];
    Variable& var = params[p].var;
    const double analytic = var.grad()[i];
    const double orig = var.value()[i];
    std::uint64_t sp = 0, sm = 0;
    var.mutable_value()[i] = orig + opts.step;
    const double fp = eval(sp);
    var.mutable_value()[i] = orig - opts.step;
    const double fm = eval(sm);
    var.mutable_value()[i] = orig;
    if (sp != base_sig || sm != base_sig) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * opts.step);
    report.entries.push_back({params[p].name, i, analytic, numeric,
                              relative_error(analytic, numeric)});
  }
  for (auto& p : params) p.var.zero_grad();
  return report;
}

}  // namespace anc
