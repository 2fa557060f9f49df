#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mogen/ops.hpp"
#include "mogen/rng.hpp"
#include "mogen/tensor.hpp"

namespace mogen {

// Diagonal state matrix stored as log of the negated entries, so A = -exp(a_log)
// stays strictly negative under unconstrained optimization and the discretized
// factor exp(delta * A) stays in (0, 1).
template <typename S>
struct SsmParams {
  Tensor<S> a_log;   // [channels x state]
  Tensor<S> d_skip;  // [channels]
  bool use_skip = true;
};

// Input-dependent selection: B_t, C_t shared across channels per timestep,
// delta per channel via softplus(x W_delta + bias).
template <typename S>
struct SelectionParams {
  Tensor<S> w_b;        // [channels x state]
  Tensor<S> b_b;        // [state]
  Tensor<S> w_c;        // [channels x state]
  Tensor<S> b_c;        // [state]
  Tensor<S> w_delta;    // [channels x channels]
  Tensor<S> delta_bias; // [channels]
};

template <typename S>
SsmParams<S> make_ssm_params(std::int64_t channels, std::int64_t state, bool use_skip = true) {
  SsmParams<S> p;
  std::vector<S> a(static_cast<std::size_t>(channels * state));
  for (std::int64_t d = 0; d < channels; ++d)
    for (std::int64_t n = 0; n < state; ++n)
      a[static_cast<std::size_t>(d * state + n)] = std::log(static_cast<S>(n + 1));
  p.a_log = Tensor<S>::from_data({channels, state}, std::move(a), true);
  p.d_skip = Tensor<S>::full({channels}, S(1), true);
  p.use_skip = use_skip;
  return p;
}

// Inverse of softplus, valid for y > 0.
template <typename S>
S inv_softplus(S y) {
  return y + std::log(-std::expm1(-static_cast<double>(y)));
}

template <typename S>
SelectionParams<S> make_selection_params(std::int64_t channels, std::int64_t state, Rng& rng) {
  SelectionParams<S> p;
  const S bound = S(1) / std::sqrt(static_cast<S>(channels));
  p.w_b = Tensor<S>::uniform({channels, state}, -bound, bound, rng, true);
  p.b_b = Tensor<S>::zeros({state}, true);
  p.w_c = Tensor<S>::uniform({channels, state}, -bound, bound, rng, true);
  p.b_c = Tensor<S>::zeros({state}, true);
  p.w_delta = Tensor<S>::uniform({channels, channels}, -bound, bound, rng, true);
  // delta starts log-uniform in [1e-3, 1e-1] regardless of input statistics.
  std::vector<S> db(static_cast<std::size_t>(channels));
  for (auto& v : db) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = inv_softplus(static_cast<S>(dt));
  }
  p.delta_bias = Tensor<S>::from_data({channels}, std::move(db), true);
  return p;
}

enum class ScanMode { Sequential, Parallel };

struct ScanStats {
  std::int64_t combines = 0;
  std::int64_t depth = 0;  // circuit depth in combine rounds
};

namespace detail {

// Inclusive prefix scan over affine elements h -> a*h + b, in place, with O(n)
// combines and ceil(log2 n) circuit depth (Ladner-Fischer construction).
// level 0 is the depth-minimal variant; level >= 1 trades one pair-contraction
// round for fewer combines. dep tracks per-element circuit depth when non-null.
template <typename S>
void affine_prefix_scan(S* a, S* b, int* dep, std::int64_t n, std::int64_t stride,
                        std::int64_t dep_stride, int level, ScanStats* st) {
  if (n <= 1) return;
  auto comb = [&](std::int64_t p, std::int64_t q) {
    const std::int64_t ip = p * stride, iq = q * stride;
    b[iq] = a[iq] * b[ip] + b[iq];
    a[iq] = a[iq] * a[ip];
    if (dep) {
      const std::int64_t dp = p * dep_stride, dq = q * dep_stride;
      dep[dq] = std::max(dep[dp], dep[dq]) + 1;
    }
    if (st) ++st->combines;
  };
  if (n == 2) {
    comb(0, 1);
    return;
  }
  if (level == 0) {
    // Split halves; the left half runs the cheaper variant one level up, every
    // right prefix then absorbs the left total in a single round.
    const std::int64_t m = (n + 1) / 2;
    affine_prefix_scan(a, b, dep, m, stride, dep_stride, 1, st);
    affine_prefix_scan(a + m * stride, b + m * stride, dep ? dep + m * dep_stride : nullptr,
                       n - m, stride, dep_stride, 0, st);
    for (std::int64_t i = m; i < n; ++i) comb(m - 1, i);
  } else {
    // Contract adjacent pairs, scan the contracted lane at double stride, then
    // fix up the skipped positions in one round. Odd lengths pair from the
    // right so the leftover element joins the recursion at its own depth.
    const std::int64_t pairs = n / 2;
    if (n % 2 == 0) {
      for (std::int64_t i = 0; i < pairs; ++i) comb(2 * i, 2 * i + 1);
      affine_prefix_scan(a + stride, b + stride, dep ? dep + dep_stride : nullptr, pairs,
                         stride * 2, dep_stride * 2, level - 1, st);
      for (std::int64_t j = 2; j < n; j += 2) comb(j - 1, j);
    } else {
      for (std::int64_t i = 1; i <= pairs; ++i) comb(2 * i - 1, 2 * i);
      affine_prefix_scan(a, b, dep, pairs + 1, stride * 2, dep_stride * 2, level - 1, st);
      for (std::int64_t j = 1; j + 1 < n; j += 2) comb(j - 1, j);
    }
  }
}

}  // namespace detail

// Zero-order hold on A, Euler on B: Abar = exp(delta*A), Bbar = delta*B.
// Returns rank-3 [T x channels x state] factors; forward-only utility.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> discretize(const Tensor<S>& delta, const Tensor<S>& a,
                                           const Tensor<S>& b) {
  if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 2 || delta.dim(1) != a.dim(0) ||
      b.dim(1) != a.dim(1) || b.dim(0) != delta.dim(0)) {
    throw ShapeError("discretize: delta " + shape_str(delta.shape()) + ", A " +
                     shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  }
  const std::int64_t t_len = delta.dim(0), ch = a.dim(0), st = a.dim(1);
  for (std::int64_t i = 0; i < delta.numel(); ++i) {
    if (!(delta.at(i) > S(0)))
      throw NumericError("discretize: delta must be strictly positive, got " +
                         std::to_string(static_cast<double>(delta.at(i))));
  }
  std::vector<S> abar(static_cast<std::size_t>(t_len * ch * st));
  std::vector<S> bbar(static_cast<std::size_t>(t_len * ch * st));
  for (std::int64_t t = 0; t < t_len; ++t)
    for (std::int64_t d = 0; d < ch; ++d) {
      const S dt = delta.at(t, d);
      for (std::int64_t n = 0; n < st; ++n) {
        const std::size_t i = static_cast<std::size_t>((t * ch + d) * st + n);
        abar[i] = std::exp(dt * a.at(d, n));
        bbar[i] = dt * b.at(t, n);
      }
    }
  return {Tensor<S>::from_data({t_len, ch, st}, std::move(abar)),
          Tensor<S>::from_data({t_len, ch, st}, std::move(bbar))};
}

// Core scan primitive with a hand-derived adjoint. Computes, per channel d and
// state n,
//   h[t] = exp(delta[t,d] A[d,n]) h[t-1] + delta[t,d] B[t,n] x[t,d]
//   y[t,d] = sum_n C[t,n] h[t,d,n] (+ d_skip[d] x[t,d])
// from h[-1] = 0. Parallel mode evaluates the same recurrence through the
// associative composition (a2*a1, a2*b1 + b2) of affine elements.
template <typename S>
Tensor<S> selective_scan(const Tensor<S>& x, const Tensor<S>& delta, const Tensor<S>& b_sel,
                         const Tensor<S>& c_sel, const Tensor<S>& a, const Tensor<S>* d_skip,
                         ScanMode mode, ScanStats* stats = nullptr) {
  if (x.rank() != 2 || delta.shape() != x.shape()) {
    throw ShapeError("selective_scan: x " + shape_str(x.shape()) + " vs delta " +
                     shape_str(delta.shape()));
  }
  const std::int64_t t_len = x.dim(0), ch = x.dim(1), st = a.dim(1);
  if (a.rank() != 2 || a.dim(0) != ch || b_sel.rank() != 2 || b_sel.dim(0) != t_len ||
      b_sel.dim(1) != st || c_sel.shape() != b_sel.shape()) {
    throw ShapeError("selective_scan: inconsistent shapes x " + shape_str(x.shape()) + ", A " +
                     shape_str(a.shape()) + ", B " + shape_str(b_sel.shape()) + ", C " +
                     shape_str(c_sel.shape()));
  }
  if (d_skip && (d_skip->rank() != 1 || d_skip->dim(0) != ch))
    throw ShapeError("selective_scan: d_skip " + shape_str(d_skip->shape()));
  for (std::int64_t i = 0; i < delta.numel(); ++i) {
    if (!(delta.at(i) > S(0)))
      throw NumericError("selective_scan: delta must be strictly positive at index " +
                         std::to_string(i));
  }

  const std::size_t lanes = static_cast<std::size_t>(ch * st);
  bool needs_grad = false;
  if (grad_enabled()) {
    needs_grad = x.requires_grad() || delta.requires_grad() || b_sel.requires_grad() ||
                 c_sel.requires_grad() || a.requires_grad() ||
                 (d_skip && d_skip->requires_grad());
  }

  std::vector<S> y(static_cast<std::size_t>(t_len * ch), S(0));
  std::vector<S> h_all;    // [T x ch x st], kept when the adjoint needs it
  std::vector<S> abar_all; // same layout

  const S* xv = x.data();
  const S* dv = delta.data();
  const S* bv = b_sel.data();
  const S* cv = c_sel.data();
  const S* av = a.data();

  if (mode == ScanMode::Sequential) {
    std::vector<S> h(lanes, S(0));
    if (needs_grad) {
      h_all.resize(lanes * static_cast<std::size_t>(t_len));
      abar_all.resize(lanes * static_cast<std::size_t>(t_len));
    }
    for (std::int64_t t = 0; t < t_len; ++t) {
      const S* brow = bv + t * st;
      const S* crow = cv + t * st;
      for (std::int64_t d = 0; d < ch; ++d) {
        const S dt = dv[t * ch + d];
        const S xval = xv[t * ch + d];
        S* hlane = h.data() + d * st;
        const S* alane = av + d * st;
        S yacc = 0;
        for (std::int64_t n = 0; n < st; ++n) {
          const S abar = std::exp(dt * alane[n]);
          hlane[n] = abar * hlane[n] + dt * brow[n] * xval;
          yacc += crow[n] * hlane[n];
          if (needs_grad) {
            const std::size_t i = static_cast<std::size_t>(t) * lanes +
                                  static_cast<std::size_t>(d * st + n);
            h_all[i] = hlane[n];
            abar_all[i] = abar;
          }
        }
        y[static_cast<std::size_t>(t * ch + d)] = yacc;
      }
    }
  } else {
    // Materialize the affine elements, scan each (d, n) lane, read off h.
    std::vector<S> aa(lanes * static_cast<std::size_t>(t_len));
    std::vector<S> bb(lanes * static_cast<std::size_t>(t_len));
    for (std::int64_t t = 0; t < t_len; ++t)
      for (std::int64_t d = 0; d < ch; ++d) {
        const S dt = dv[t * ch + d];
        const S xval = xv[t * ch + d];
        for (std::int64_t n = 0; n < st; ++n) {
          const std::size_t i =
              static_cast<std::size_t>(t) * lanes + static_cast<std::size_t>(d * st + n);
          aa[i] = std::exp(dt * av[d * st + n]);
          bb[i] = dt * bv[t * st + n] * xval;
        }
      }
    if (needs_grad) abar_all = aa;  // the scan overwrites aa with prefix products
    std::vector<int> dep;
    if (stats) dep.assign(static_cast<std::size_t>(t_len), 0);
    std::int64_t max_depth = 0;
    for (std::size_t lane = 0; lane < lanes; ++lane) {
      if (stats) std::fill(dep.begin(), dep.end(), 0);
      detail::affine_prefix_scan(aa.data() + lane, bb.data() + lane, stats ? dep.data() : nullptr,
                                 t_len, static_cast<std::int64_t>(lanes), 1, 0, stats);
      if (stats)
        for (int dv2 : dep) max_depth = std::max<std::int64_t>(max_depth, dv2);
    }
    if (stats) stats->depth = max_depth;
    for (std::int64_t t = 0; t < t_len; ++t) {
      const S* crow = cv + t * st;
      for (std::int64_t d = 0; d < ch; ++d) {
        S yacc = 0;
        const std::size_t base =
            static_cast<std::size_t>(t) * lanes + static_cast<std::size_t>(d * st);
        for (std::int64_t n = 0; n < st; ++n) yacc += crow[n] * bb[base + static_cast<std::size_t>(n)];
        y[static_cast<std::size_t>(t * ch + d)] = yacc;
      }
    }
    if (needs_grad) h_all = std::move(bb);
  }

  if (d_skip) {
    const S* sv = d_skip->data();
    for (std::int64_t t = 0; t < t_len; ++t)
      for (std::int64_t d = 0; d < ch; ++d)
        y[static_cast<std::size_t>(t * ch + d)] += sv[d] * xv[t * ch + d];
  }

  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!std::isfinite(static_cast<double>(y[i])))
      throw NumericError("selective_scan: non-finite state at step " +
                         std::to_string(i / static_cast<std::size_t>(ch)));
  }

  std::vector<Tensor<S>> parents = {x, delta, b_sel, c_sel, a};
  if (d_skip) parents.push_back(*d_skip);
  auto xn = x.node(), dn = delta.node(), bn = b_sel.node(), cn = c_sel.node(), an = a.node();
  auto skipn = d_skip ? d_skip->node() : nullptr;

  // Adjoint of the recurrence, run backward in time; valid for both modes
  // because they evaluate the same map.
  auto backward_fn = [xn, dn, bn, cn, an, skipn, t_len, ch, st, lanes,
                      h_all = std::move(h_all),
                      abar_all = std::move(abar_all)](detail::Node<S>& out) {
    const bool gx = xn->requires_grad, gd = dn->requires_grad, gb = bn->requires_grad,
               gc = cn->requires_grad, ga = an->requires_grad,
               gs = skipn && skipn->requires_grad;
    if (gx) xn->ensure_grad();
    if (gd) dn->ensure_grad();
    if (gb) bn->ensure_grad();
    if (gc) cn->ensure_grad();
    if (ga) an->ensure_grad();
    if (gs) skipn->ensure_grad();

    std::vector<S> gh(lanes, S(0));
    std::vector<S> gh_next(lanes, S(0));
    for (std::int64_t t = t_len - 1; t >= 0; --t) {
      const std::size_t tb = static_cast<std::size_t>(t) * lanes;
      for (std::int64_t d = 0; d < ch; ++d) {
        const S gy = out.grad[static_cast<std::size_t>(t * ch + d)];
        const S dt = dn->values[static_cast<std::size_t>(t * ch + d)];
        const S xval = xn->values[static_cast<std::size_t>(t * ch + d)];
        S gdelta_acc = 0, gx_acc = 0;
        for (std::int64_t n = 0; n < st; ++n) {
          const std::size_t lane = static_cast<std::size_t>(d * st + n);
          const std::size_t i = tb + lane;
          const S c_tn = cn->values[static_cast<std::size_t>(t * st + n)];
          const S b_tn = bn->values[static_cast<std::size_t>(t * st + n)];
          S g = gy * c_tn;
          if (t + 1 < t_len)
            g += abar_all[i + lanes] * gh_next[lane];
          gh[lane] = g;
          const S h_prev = (t > 0) ? h_all[i - lanes] : S(0);
          const S abar = abar_all[i];
          const S a_dn = an->values[lane];
          if (ga) an->grad[lane] += g * h_prev * abar * dt;
          if (gd) gdelta_acc += g * (h_prev * abar * a_dn + b_tn * xval);
          if (gb) bn->grad[static_cast<std::size_t>(t * st + n)] += g * dt * xval;
          if (gx) gx_acc += g * dt * b_tn;
          if (gc) cn->grad[static_cast<std::size_t>(t * st + n)] += gy * h_all[i];
        }
        if (gd) dn->grad[static_cast<std::size_t>(t * ch + d)] += gdelta_acc;
        if (gx) xn->grad[static_cast<std::size_t>(t * ch + d)] += gx_acc;
        if (gs) skipn->grad[static_cast<std::size_t>(d)] += gy * xval;
        if (gx && skipn)
          xn->grad[static_cast<std::size_t>(t * ch + d)] +=
              gy * skipn->values[static_cast<std::size_t>(d)];
      }
      std::swap(gh, gh_next);
    }
  };

  return Tensor<S>::make_op({t_len, ch}, std::move(y), std::move(parents), std::move(backward_fn));
}

// Applies the selection maps then scans. x is [T x channels].
template <typename S>
Tensor<S> ssm_forward(const Tensor<S>& x, const SsmParams<S>& ssm,
                      const SelectionParams<S>& sel, ScanMode mode, ScanStats* stats = nullptr) {
  Tensor<S> b_sel = linear(x, sel.w_b, sel.b_b);
  Tensor<S> c_sel = linear(x, sel.w_c, sel.b_c);
  Tensor<S> delta = softplus(add_row(matmul(x, sel.w_delta), sel.delta_bias));
  Tensor<S> a = neg(exp_op(ssm.a_log));
  return selective_scan(x, delta, b_sel, c_sel, a, ssm.use_skip ? &ssm.d_skip : nullptr, mode,
                        stats);
}

template <typename S>
Tensor<S> selective_scan_seq(const Tensor<S>& x, const SsmParams<S>& ssm,
                             const SelectionParams<S>& sel) {
  return ssm_forward(x, ssm, sel, ScanMode::Sequential);
}

template <typename S>
Tensor<S> selective_scan_par(const Tensor<S>& x, const SsmParams<S>& ssm,
                             const SelectionParams<S>& sel, ScanStats* stats = nullptr) {
  return ssm_forward(x, ssm, sel, ScanMode::Parallel, stats);
}

}  // namespace mogen
