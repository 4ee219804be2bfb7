// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Prediction heads and losses. The coordinate head classifies each axis into
// n bins and decodes a continuous value with a truncated soft-argmax; the
// visibility head is a binary classifier. Both are 3-layer gelu MLPs shared
// across all layer taps. Training combines per-axis cross entropy, Huber on
// the decoded coordinate, and sigmoid BCE on visibility, averaged over
// layers with equal weights.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tapmicro/nn.hpp"
#include "tapmicro/param_store.hpp"
#include "tapmicro/types.hpp"

namespace tapmicro {

// ---------------------------------------------------------------------------
// scalar ops
// ---------------------------------------------------------------------------

/// Expected coordinate of a bin distribution after zeroing bins more than
/// `delta` steps from the argmax and renormalizing. Bin j maps to coordinate
/// j * extent / n (0-based); argmax ties break toward the lowest index.
template <typename S>
S trunc_softargmax(const VecX<S>& p, int delta, S extent) {
  require(delta >= 0, "trunc_softargmax: delta must be non-negative");
  const Index n = p.size();
  require(n >= 1, "trunc_softargmax: empty distribution");
  Index jmax = 0;
  for (Index j = 1; j < n; ++j)
    if (p(j) > p(jmax)) jmax = j;
  const Index lo = std::max<Index>(0, jmax - delta);
  const Index hi = std::min<Index>(n - 1, jmax + delta);
  S sum = S(0), acc = S(0);
  for (Index j = lo; j <= hi; ++j) {
    sum += p(j);
    acc += p(j) * static_cast<S>(j);
  }
  if (sum <= S(0)) return static_cast<S>(jmax) * extent / static_cast<S>(n);
  return (acc / sum) * extent / static_cast<S>(n);
}

/// Bin index of a continuous coordinate: clamp(floor(coord * n / extent), 0, n-1).
inline int one_hot_target(double coord, int n, double extent) {
  require(coord >= 0.0 && coord <= extent, "one_hot_target: coordinate out of range");
  const int j = static_cast<int>(std::floor(coord * n / extent));
  return std::min(std::max(j, 0), n - 1);
}

template <typename S>
S huber(S err, S delta) {
  const S a = std::abs(err);
  return a <= delta ? S(0.5) * err * err : delta * (a - S(0.5) * delta);
}

template <typename S>
S huber_grad(S err, S delta) {
  return std::abs(err) <= delta ? err : (err > S(0) ? delta : -delta);
}

/// Stable sigmoid binary cross entropy on one logit.
template <typename S>
S visibility_loss(S logit, S label) {
  // softplus(logit) - label*logit == -label*log(sig) - (1-label)*log(1-sig)
  const S sp = logit > S(0) ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
  return sp - label * logit;
}

template <typename S>
S visibility_loss_grad(S logit, S label) {
  return sigmoid(logit) - label;
}

/// Occlusion rule: occluded when the visibility head is below 0.5 or when
/// less than half the probability mass lies within `radius` of the decoded
/// coordinate (per-axis mass product).
template <typename S>
bool uncertainty_occlusion(const VecX<S>& px, const VecX<S>& py, S decoded_x, S decoded_y,
                           S radius, S extent_x, S extent_y, S visible_prob,
                           S* mass_in_out = nullptr) {
  const Index n = px.size();
  S mx = S(0), my = S(0);
  for (Index j = 0; j < n; ++j) {
    if (std::abs(static_cast<S>(j) * extent_x / static_cast<S>(n) - decoded_x) <= radius)
      mx += px(j);
    if (std::abs(static_cast<S>(j) * extent_y / static_cast<S>(n) - decoded_y) <= radius)
      my += py(j);
  }
  const S mass_in = mx * my;
  if (mass_in_out) *mass_in_out = mass_in;
  return visible_prob < S(0.5) || mass_in < S(0.5);
}

// ---------------------------------------------------------------------------
// head parameters
// ---------------------------------------------------------------------------

template <typename S>
struct HeadParams {
  // coordinate MLP: C -> hidden -> hidden -> (2n | 2)
  ParamId c_w1, c_b1, c_w2, c_b2, c_w3, c_b3;
  // visibility MLP: C -> hidden -> hidden -> 1
  ParamId v_w1, v_b1, v_w2, v_b2, v_w3, v_b3;

  static HeadParams build(ParamStore<S>& store, const ModelConfig& cfg) {
    const int c = cfg.width, h = cfg.head_hidden;
    const int out = cfg.head_type == HeadKind::kClassification ? 2 * cfg.bins : 2;
    HeadParams p;
    p.c_w1 = store.add("head.coord.w1", c, h);
    p.c_b1 = store.add("head.coord.b1", 1, h, false);
    p.c_w2 = store.add("head.coord.w2", h, h);
    p.c_b2 = store.add("head.coord.b2", 1, h, false);
    p.c_w3 = store.add("head.coord.w3", h, out);
    p.c_b3 = store.add("head.coord.b3", 1, out, false);
    p.v_w1 = store.add("head.vis.w1", c, h);
    p.v_b1 = store.add("head.vis.b1", 1, h, false);
    p.v_w2 = store.add("head.vis.w2", h, h);
    p.v_b2 = store.add("head.vis.b2", 1, h, false);
    p.v_w3 = store.add("head.vis.w3", h, 1);
    p.v_b3 = store.add("head.vis.b3", 1, 1, false);
    return p;
  }

  void init(ParamStore<S>& store, Rng& rng, const ModelConfig&) const {
    for (ParamId id : {c_w1, c_w2, c_w3, v_w1, v_w2, v_w3})
      fill_normal<S>(store.value(id), rng, 0.02);
  }
};

template <typename S>
struct HeadCache {
  MatX<S> x_in;                    // track tokens fed to the heads
  MatX<S> c_pre1, c_pre2, logits;  // coordinate path
  MatX<S> v_pre1, v_pre2, v_logit;
};

/// Runs both head MLPs on [rows, C] track tokens; logits per row are
/// [x bins | y bins] (classification) or [x, y] (regression).
template <typename S>
void heads_forward(const MatX<S>& tokens, const ParamStore<S>& store, const HeadParams<S>& p,
                   HeadCache<S>& c) {
  c.x_in = tokens;
  c.c_pre1 = linear<S>(tokens, store.value(p.c_w1), store.row(p.c_b1));
  MatX<S> a1 = c.c_pre1.unaryExpr([](S v) { return gelu(v); });
  c.c_pre2 = linear<S>(a1, store.value(p.c_w2), store.row(p.c_b2));
  MatX<S> a2 = c.c_pre2.unaryExpr([](S v) { return gelu(v); });
  c.logits = linear<S>(a2, store.value(p.c_w3), store.row(p.c_b3));

  c.v_pre1 = linear<S>(tokens, store.value(p.v_w1), store.row(p.v_b1));
  MatX<S> b1 = c.v_pre1.unaryExpr([](S v) { return gelu(v); });
  c.v_pre2 = linear<S>(b1, store.value(p.v_w2), store.row(p.v_b2));
  MatX<S> b2 = c.v_pre2.unaryExpr([](S v) { return gelu(v); });
  c.v_logit = linear<S>(b2, store.value(p.v_w3), store.row(p.v_b3));
}

/// Backward through both head MLPs; returns gradient w.r.t. the track tokens.
template <typename S>
MatX<S> heads_backward(const HeadCache<S>& c, const MatX<S>& dlogits, const MatX<S>& dvlogit,
                       ParamStore<S>& store, const HeadParams<S>& p) {
  MatX<S> a2 = c.c_pre2.unaryExpr([](S v) { return gelu(v); });
  MatX<S> da2 = linear_backward<S>(a2, store.value(p.c_w3), dlogits, store.grad(p.c_w3),
                                   store.row_grad(p.c_b3));
  MatX<S> dpre2 =
      (da2.array() * c.c_pre2.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  MatX<S> a1 = c.c_pre1.unaryExpr([](S v) { return gelu(v); });
  MatX<S> da1 = linear_backward<S>(a1, store.value(p.c_w2), dpre2, store.grad(p.c_w2),
                                   store.row_grad(p.c_b2));
  MatX<S> dpre1 =
      (da1.array() * c.c_pre1.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  MatX<S> dx = linear_backward<S>(c.x_in, store.value(p.c_w1), dpre1, store.grad(p.c_w1),
                                  store.row_grad(p.c_b1));

  MatX<S> b2 = c.v_pre2.unaryExpr([](S v) { return gelu(v); });
  MatX<S> db2 = linear_backward<S>(b2, store.value(p.v_w3), dvlogit, store.grad(p.v_w3),
                                   store.row_grad(p.v_b3));
  MatX<S> dvpre2 =
      (db2.array() * c.v_pre2.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  MatX<S> b1 = c.v_pre1.unaryExpr([](S v) { return gelu(v); });
  MatX<S> db1 = linear_backward<S>(b1, store.value(p.v_w2), dvpre2, store.grad(p.v_w2),
                                   store.row_grad(p.v_b2));
  MatX<S> dvpre1 =
      (db1.array() * c.v_pre1.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  dx += linear_backward<S>(c.x_in, store.value(p.v_w1), dvpre1, store.grad(p.v_w1),
                           store.row_grad(p.v_b1));
  return dx;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct LossWeights {
  double huber = 0.1;      // w1 = w2
  double ce = 1.0;         // w3 = w4
  double vis = 1.0;        // visibility BCE
  double huber_reg = 1.0;  // Huber weight for the regression-head variant
  bool use_ce = true;      // Table-3 style loss-mix switches
  bool use_huber = true;
};

struct LossBreakdown {
  double total = 0.0;
  double huber = 0.0;
  double ce = 0.0;
  double vis = 0.0;
};

/// Supervision for one clip: [T*Q] cells in row order t*Q + j.
template <typename S>
struct TrackTargets {
  std::vector<S> x, y;            // ground-truth coordinates, pixel units
  std::vector<S> vis_label;       // visibility label (0 before the query frame)
  std::vector<char> coord_mask;   // coordinate losses apply where true
};

/// Decoded state for one cell of the classification head.
template <typename S>
struct DecodedCell {
  S x = S(0), y = S(0);
  Index jx = 0, jy = 0;  // argmax bins
};

namespace detail {

template <typename S>
S log_sum_exp(const RowVecX<S>& z) {
  const S m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

/// softargmax over one axis slice of tempered probabilities; returns decoded
/// coordinate and writes dL/dlogits for the Huber path when `g` is nonzero.
template <typename S>
S decode_axis(const RowVecX<S>& probs, int delta, S extent, Index* jmax_out) {
  const Index n = probs.size();
  Index jmax = 0;
  for (Index j = 1; j < n; ++j)
    if (probs(j) > probs(jmax)) jmax = j;
  if (jmax_out) *jmax_out = jmax;
  const Index lo = std::max<Index>(0, jmax - delta);
  const Index hi = std::min<Index>(n - 1, jmax + delta);
  S sum = S(0), acc = S(0);
  for (Index j = lo; j <= hi; ++j) {
    sum += probs(j);
    acc += probs(j) * static_cast<S>(j);
  }
  return (acc / sum) * extent / static_cast<S>(n);
}

}  // namespace detail

/// Loss over one layer tap. Coordinate losses are averaged over unmasked
/// cells, visibility over all cells. When `dlogits`/`dvlogit` are non-null
/// the per-cell gradients are written there, already scaled by
/// `grad_scale` (the 1/L layer weight times any batch scaling).
template <typename S>
LossBreakdown layer_loss(const MatX<S>& logits, const MatX<S>& v_logit,
                         const TrackTargets<S>& targets, const ModelConfig& cfg,
                         const LossWeights& w, S grad_scale = S(0), MatX<S>* dlogits = nullptr,
                         MatX<S>* dvlogit = nullptr) {
  const Index cells = logits.rows();
  const int n = cfg.bins;
  const S ex = static_cast<S>(cfg.input_width), ey = static_cast<S>(cfg.input_height);
  const S bw_x = ex / static_cast<S>(n), bw_y = ey / static_cast<S>(n);
  const S tau = static_cast<S>(cfg.temperature);
  Index n_unmasked = 0;
  for (char m : targets.coord_mask) n_unmasked += (m != 0);
  const S coord_scale = n_unmasked > 0 ? S(1) / static_cast<S>(n_unmasked) : S(0);
  const S vis_scale = S(1) / static_cast<S>(cells);

  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  if (dvlogit) dvlogit->setZero(v_logit.rows(), v_logit.cols());

  LossBreakdown out;
  for (Index cell = 0; cell < cells; ++cell) {
    const S vl = v_logit(cell, 0);
    const S vlabel = targets.vis_label[cell];
    out.vis += static_cast<double>(visibility_loss(vl, vlabel)) * vis_scale;
    if (dvlogit)
      (*dvlogit)(cell, 0) =
          grad_scale * static_cast<S>(w.vis) * vis_scale * visibility_loss_grad(vl, vlabel);
    if (!targets.coord_mask[cell]) continue;

    if (cfg.head_type == HeadKind::kRegression) {
      const S exr = logits(cell, 0) - targets.x[cell];
      const S eyr = logits(cell, 1) - targets.y[cell];
      out.huber += static_cast<double>(huber(exr, bw_x) + huber(eyr, bw_y)) * coord_scale;
      if (dlogits) {
        (*dlogits)(cell, 0) =
            grad_scale * static_cast<S>(w.huber_reg) * coord_scale * huber_grad(exr, bw_x);
        (*dlogits)(cell, 1) =
            grad_scale * static_cast<S>(w.huber_reg) * coord_scale * huber_grad(eyr, bw_y);
      }
      continue;
    }

    for (int axis = 0; axis < 2; ++axis) {
      const RowVecX<S> z = logits.block(cell, axis * n, 1, n);
      const S target_coord = axis == 0 ? targets.x[cell] : targets.y[cell];
      const S extent = axis == 0 ? ex : ey;
      const S bw = axis == 0 ? bw_x : bw_y;
      const int jt = one_hot_target(static_cast<double>(target_coord), n,
                                    static_cast<double>(extent));
      // cross entropy on raw logits
      if (w.use_ce) {
        const S lse = detail::log_sum_exp(z);
        out.ce += static_cast<double>(lse - z(jt)) * coord_scale;
      }
      // Huber on the truncated soft-argmax of the tempered distribution
      RowVecX<S> probs = ((z.array() - z.maxCoeff()) / tau).exp();
      probs /= probs.sum();
      Index jmax = 0;
      const S decoded = detail::decode_axis(probs, cfg.softargmax_delta, extent, &jmax);
      const S err = decoded - target_coord;
      if (w.use_huber) out.huber += static_cast<double>(huber(err, bw)) * coord_scale;

      if (dlogits) {
        RowVecX<S> dz = RowVecX<S>::Zero(n);
        if (w.use_ce) {
          RowVecX<S> sm = (z.array() - z.maxCoeff()).exp();
          sm /= sm.sum();
          sm(jt) -= S(1);
          dz += sm * (static_cast<S>(w.ce) * coord_scale);
        }
        if (w.use_huber) {
          // d decoded / d probs through the straight-through truncation mask
          const Index lo = std::max<Index>(0, jmax - cfg.softargmax_delta);
          const Index hi = std::min<Index>(n - 1, jmax + cfg.softargmax_delta);
          S sum = S(0);
          for (Index j = lo; j <= hi; ++j) sum += probs(j);
          const S g = static_cast<S>(w.huber) * coord_scale * huber_grad(err, bw);
          RowVecX<S> dp = RowVecX<S>::Zero(n);
          for (Index j = lo; j <= hi; ++j)
            dp(j) = g * bw * (static_cast<S>(j) - decoded / bw) / sum;
          // tempered softmax backward
          const S dot = (dp.array() * probs.array()).sum();
          dz += (((dp.array() - dot) * probs.array()) / tau).matrix();
        }
        dlogits->block(cell, axis * n, 1, n) += dz * grad_scale;
      }
    }
  }
  const double coord_total = (w.use_ce ? w.ce * out.ce : 0.0) +
                             (cfg.head_type == HeadKind::kRegression
                                  ? w.huber_reg * out.huber
                                  : (w.use_huber ? w.huber * out.huber : 0.0));
  out.total = coord_total + w.vis * out.vis;
  return out;
}

}  // namespace tapmicro
