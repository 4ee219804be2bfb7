// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Gated linear recurrent unit (RG-LRU) applied independently to every
// spatiotemporal tube:
//   r_t = sigmoid(W_r x_t + b_r)            (recurrence gate)
//   i_t = sigmoid(W_i x_t + b_i)            (input gate)
//   a_t = exp(-c * softplus(lambda) .* r_t)
//   h_t = a_t .* h_{t-1} + sqrt(1 - a_t^2) .* i_t .* x_t
// The same update runs either one frame at a time with O(1) state or as an
// associative parallel scan over the whole sequence; both paths agree to
// float tolerance.
#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "tapmicro/nn.hpp"
#include "tapmicro/param_store.hpp"
#include "tapmicro/types.hpp"

namespace tapmicro {

template <typename S>
struct RecurrentBlockParams {
  ParamId w_in, b_in;    // C -> lru
  ParamId w_r, b_r;      // lru -> lru recurrence gate
  ParamId w_i, b_i;      // lru -> lru input gate
  ParamId lambda;        // [1, lru] decay parameter
  ParamId w_out, b_out;  // lru -> C

  static RecurrentBlockParams build(ParamStore<S>& store, const std::string& prefix,
                                    const ModelConfig& cfg) {
    const int c = cfg.width, l = cfg.lru_width();
    RecurrentBlockParams p;
    p.w_in = store.add(prefix + ".w_in", c, l);
    p.b_in = store.add(prefix + ".b_in", 1, l, false);
    p.w_r = store.add(prefix + ".w_r", l, l);
    p.b_r = store.add(prefix + ".b_r", 1, l, false);
    p.w_i = store.add(prefix + ".w_i", l, l);
    p.b_i = store.add(prefix + ".b_i", 1, l, false);
    p.lambda = store.add(prefix + ".lambda", 1, l, false);
    p.w_out = store.add(prefix + ".w_out", l, c);
    p.b_out = store.add(prefix + ".b_out", 1, c, false);
    return p;
  }

  void init(ParamStore<S>& store, Rng& rng, const ModelConfig& cfg) const {
    fill_normal<S>(store.value(w_in), rng, 0.02);
    fill_normal<S>(store.value(w_r), rng, 0.02);
    fill_normal<S>(store.value(w_i), rng, 0.02);
    fill_normal<S>(store.value(w_out), rng, 0.02);
    // Slow-decay init: a_t at r = 0.5 drawn log-uniformly in (0.9, 0.999).
    auto lam = store.row(lambda);
    for (Index k = 0; k < lam.cols(); ++k) {
      const double u = uniform<double>(rng, std::log(-std::log(0.999)), std::log(-std::log(0.9)));
      const double sp = 2.0 * std::exp(u) / cfg.decay_c;  // softplus(lambda)
      lam(k) = static_cast<S>(std::log(std::expm1(sp)));
    }
  }
};

/// Elementwise clamp of the recurrence gate (long-video mitigation).
template <typename S>
MatX<S> clamp_forget_gate(const MatX<S>& r, S lo, S hi) {
  require(S(0) <= lo && lo < hi && hi <= S(1), "clamp_forget_gate: need 0 <= lo < hi <= 1");
  return r.array().min(hi).max(lo).matrix();
}

/// Hidden state of one token tube.
template <typename S>
struct RecurrentState {
  VecX<S> h;
};

namespace detail {

/// Gate activations for a block of in-projected inputs x ([rows, lru]).
template <typename S>
struct Gates {
  MatX<S> r;      // recurrence gate after optional clamp
  MatX<S> r_raw;  // sigmoid output before clamp
  MatX<S> i;      // input gate
  MatX<S> a;      // decay, in (0,1)
  MatX<S> sq;     // sqrt(1 - a^2)
};

template <typename S>
Gates<S> compute_gates(const MatX<S>& x, const ParamStore<S>& store,
                       const RecurrentBlockParams<S>& p, const ModelConfig& cfg) {
  Gates<S> g;
  g.r_raw =
      linear<S>(x, store.value(p.w_r), store.row(p.b_r)).unaryExpr([](S v) { return sigmoid(v); });
  g.r = cfg.forget_gate_clamp_enabled
            ? clamp_forget_gate<S>(g.r_raw, S(cfg.forget_gate_clamp_lo),
                                   S(cfg.forget_gate_clamp_hi))
            : g.r_raw;
  g.i =
      linear<S>(x, store.value(p.w_i), store.row(p.b_i)).unaryExpr([](S v) { return sigmoid(v); });
  RowVecX<S> cs = store.row(p.lambda).unaryExpr(
      [&](S v) { return static_cast<S>(cfg.decay_c) * softplus(v); });
  MatX<S> q = (g.r.array().rowwise() * cs.array()).matrix();
  g.a = (-q.array()).exp().matrix();
  // 1 - a^2 = -expm1(-2q), accurate when a is close to 1
  g.sq = (S(-2) * q.array()).unaryExpr([](S v) { return std::sqrt(-std::expm1(v)); }).matrix();
  return g;
}

/// In-place inclusive associative scan over time on coefficient/offset pairs.
/// Rows are laid out t*n_tubes + tube; the combine operator is
/// (a2,b2)∘(a1,b1) = (a1.*a2, a2.*b1 + b2).
template <typename S>
void associative_scan(MatX<S>& a, MatX<S>& b, Index n_tubes) {
  const Index t_len = a.rows() / n_tubes;
  for (Index d = 1; d < t_len; d *= 2) {
    // descending t keeps the (t - d) operands from the previous sweep intact
    for (Index t = t_len - 1; t >= d; --t) {
      auto at = a.middleRows(t * n_tubes, n_tubes);
      auto bt = b.middleRows(t * n_tubes, n_tubes);
      const auto alo = a.middleRows((t - d) * n_tubes, n_tubes);
      const auto blo = b.middleRows((t - d) * n_tubes, n_tubes);
      bt.array() += at.array() * blo.array();
      at.array() *= alo.array();
    }
  }
}

}  // namespace detail

/// One recurrence step for a single tube. Returns y_t (= h_t) and leaves the
/// advanced state in `state`.
template <typename S>
VecX<S> rglru_step(RecurrentState<S>& state, const VecX<S>& x_t, const ParamStore<S>& store,
                   const RecurrentBlockParams<S>& p, const ModelConfig& cfg) {
  if (!x_t.allFinite()) throw NumericError("rglru_step: non-finite input");
  MatX<S> x = x_t.transpose();
  detail::Gates<S> g = detail::compute_gates(x, store, p, cfg);
  if (state.h.size() == 0) state.h = VecX<S>::Zero(x_t.size());
  state.h = (g.a.row(0).transpose().array() * state.h.array() +
             g.sq.row(0).transpose().array() * g.i.row(0).transpose().array() * x_t.array())
                .matrix();
  return state.h;
}

/// Full-sequence recurrence for one tube ([T, lru] input) via the associative
/// parallel scan. Matches T iterated rglru_step applications to float
/// tolerance; returns the outputs and the final state.
template <typename S>
std::pair<MatX<S>, VecX<S>> rglru_scan(const MatX<S>& x, const ParamStore<S>& store,
                                       const RecurrentBlockParams<S>& p, const ModelConfig& cfg,
                                       const VecX<S>& init_state = VecX<S>()) {
  require(x.rows() >= 1, "rglru_scan: need T >= 1");
  if (!x.allFinite()) throw NumericError("rglru_scan: non-finite input");
  detail::Gates<S> g = detail::compute_gates(x, store, p, cfg);
  MatX<S> a = g.a;
  MatX<S> b = (g.sq.array() * g.i.array() * x.array()).matrix();
  detail::associative_scan(a, b, Index(1));
  if (init_state.size() > 0)
    b.array() += a.array().rowwise() * init_state.transpose().array();
  VecX<S> final_state = b.row(b.rows() - 1).transpose();
  return {std::move(b), std::move(final_state)};
}

/// Training cache for one recurrent block application.
template <typename S>
struct RecurrentCache {
  MatX<S> x_in;  // block input tokens [T*N, C]
  MatX<S> xp;    // in-projected inputs [T*N, lru]
  detail::Gates<S> gates;
  MatX<S> h;  // scanned states [T*N, lru]
  Index n_tubes = 0;
};

/// Block forward over a [T*N, C] token grid in scan mode; the N tubes never
/// interact. Residual structure: out = tokens + W_out * rglru(W_in * tokens).
template <typename S>
MatX<S> recurrent_block_forward(const MatX<S>& tokens, const ParamStore<S>& store,
                                const RecurrentBlockParams<S>& p, const ModelConfig& cfg,
                                Index n_tubes, RecurrentCache<S>* cache = nullptr) {
  require_shape(n_tubes > 0 && tokens.rows() % n_tubes == 0,
                "recurrent_block_forward: bad tube count");
  MatX<S> xp = linear<S>(tokens, store.value(p.w_in), store.row(p.b_in));
  detail::Gates<S> g = detail::compute_gates(xp, store, p, cfg);
  MatX<S> a = g.a;
  MatX<S> h = (g.sq.array() * g.i.array() * xp.array()).matrix();
  detail::associative_scan(a, h, n_tubes);
  MatX<S> out = linear<S>(h, store.value(p.w_out), store.row(p.b_out));
  out += tokens;
  if (cache) {
    cache->x_in = tokens;
    cache->xp = std::move(xp);
    cache->gates = std::move(g);
    cache->h = std::move(h);
    cache->n_tubes = n_tubes;
  }
  return out;
}

/// Single-frame step over a bank of tube states ([N, lru]); the streaming
/// path. `states` is advanced in place.
template <typename S>
MatX<S> recurrent_block_step(const MatX<S>& tokens, const ParamStore<S>& store,
                             const RecurrentBlockParams<S>& p, const ModelConfig& cfg,
                             MatX<S>& states) {
  require_shape(states.rows() == tokens.rows() && states.cols() == cfg.lru_width(),
                "recurrent_block_step: state bank mismatch");
  MatX<S> xp = linear<S>(tokens, store.value(p.w_in), store.row(p.b_in));
  detail::Gates<S> g = detail::compute_gates(xp, store, p, cfg);
  states = (g.a.array() * states.array() + g.sq.array() * g.i.array() * xp.array()).matrix();
  MatX<S> out = linear<S>(states, store.value(p.w_out), store.row(p.b_out));
  out += tokens;
  return out;
}

/// Backward through recurrent_block_forward; returns the gradient w.r.t. the
/// block input and accumulates parameter gradients.
template <typename S>
MatX<S> recurrent_block_backward(const MatX<S>& dout, const RecurrentCache<S>& c,
                                 ParamStore<S>& store, const RecurrentBlockParams<S>& p,
                                 const ModelConfig& cfg) {
  const Index n = c.n_tubes;
  const Index t_len = c.h.rows() / n;
  const Index lru = c.h.cols();

  MatX<S> dh = linear_backward<S>(c.h, store.value(p.w_out), dout, store.grad(p.w_out),
                                  store.row_grad(p.b_out));

  RowVecX<S> cs = store.row(p.lambda).unaryExpr(
      [&](S v) { return static_cast<S>(cfg.decay_c) * softplus(v); });

  MatX<S> du_r(c.h.rows(), lru);
  MatX<S> du_i(c.h.rows(), lru);
  MatX<S> dxp = MatX<S>::Zero(c.h.rows(), lru);
  RowVecX<S> ds_total = RowVecX<S>::Zero(lru);

  MatX<S> g_next;  // dL/dh_{t+1}
  for (Index t = t_len - 1; t >= 0; --t) {
    const auto a_t = c.gates.a.middleRows(t * n, n).array();
    const auto sq_t = c.gates.sq.middleRows(t * n, n).array();
    const auto i_t = c.gates.i.middleRows(t * n, n).array();
    const auto x_t = c.xp.middleRows(t * n, n).array();
    const auto r_t = c.gates.r.middleRows(t * n, n).array();
    const auto rr_t = c.gates.r_raw.middleRows(t * n, n).array();

    MatX<S> g = dh.middleRows(t * n, n);
    if (t + 1 < t_len)
      g.array() += c.gates.a.middleRows((t + 1) * n, n).array() * g_next.array();

    ArrX<S> h_prev =
        t > 0 ? ArrX<S>(c.h.middleRows((t - 1) * n, n).array()) : ArrX<S>::Zero(n, lru);
    ArrX<S> da = g.array() * h_prev;
    ArrX<S> dsq = g.array() * i_t * x_t;
    du_i.middleRows(t * n, n) = (g.array() * sq_t * x_t * i_t * (S(1) - i_t)).matrix();
    dxp.middleRows(t * n, n) += (g.array() * sq_t * i_t).matrix();
    // a = exp(-q), sq = sqrt(1 - a^2)  =>  dq = -a*da + (a^2/sq)*dsq
    ArrX<S> dq = -a_t * da + (a_t * a_t / sq_t.max(S(1e-12))) * dsq;
    ArrX<S> dr = dq.rowwise() * cs.array();
    if (cfg.forget_gate_clamp_enabled) {
      const S lo = S(cfg.forget_gate_clamp_lo), hi = S(cfg.forget_gate_clamp_hi);
      dr *= ((rr_t >= lo) && (rr_t <= hi)).template cast<S>();
    }
    du_r.middleRows(t * n, n) = (dr * rr_t * (S(1) - rr_t)).matrix();
    ds_total += (dq * r_t).colwise().sum().matrix();
    g_next = std::move(g);
  }

  auto lam = store.row(p.lambda);
  store.row_grad(p.lambda) += (ds_total.array() * static_cast<S>(cfg.decay_c) *
                               lam.unaryExpr([](S v) { return sigmoid(v); }).array())
                                  .matrix();

  dxp += linear_backward<S>(c.xp, store.value(p.w_r), du_r, store.grad(p.w_r),
                            store.row_grad(p.b_r));
  dxp += linear_backward<S>(c.xp, store.value(p.w_i), du_i, store.grad(p.w_i),
                            store.row_grad(p.b_i));
  MatX<S> dtokens = linear_backward<S>(c.x_in, store.value(p.w_in), dxp, store.grad(p.w_in),
                                       store.row_grad(p.b_in));
  dtokens += dout;  // residual
  return dtokens;
}

}  // namespace tapmicro
