// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Spatial half of a layer: pre-norm multi-head self-attention across the
// h*w + Q tokens of each frame plus a gelu MLP, treating time as batch.
// Also hosts the temporal-attention ablation block (causal over T, rotary
// position embeddings) that can replace the recurrent block in offline mode.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tapmicro/nn.hpp"
#include "tapmicro/param_store.hpp"
#include "tapmicro/types.hpp"

namespace tapmicro {

template <typename S>
struct SpatialBlockParams {
  ParamId ln1_g, ln1_b;
  ParamId w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  ParamId ln2_g, ln2_b;
  ParamId w_m1, b_m1, w_m2, b_m2;  // MLP C -> 4C -> C

  static SpatialBlockParams build(ParamStore<S>& store, const std::string& prefix,
                                  const ModelConfig& cfg) {
    const int c = cfg.width;
    SpatialBlockParams p;
    p.ln1_g = store.add(prefix + ".ln1.g", 1, c, false);
    p.ln1_b = store.add(prefix + ".ln1.b", 1, c, false);
    p.w_q = store.add(prefix + ".attn.w_q", c, c);
    p.b_q = store.add(prefix + ".attn.b_q", 1, c, false);
    p.w_k = store.add(prefix + ".attn.w_k", c, c);
    p.b_k = store.add(prefix + ".attn.b_k", 1, c, false);
    p.w_v = store.add(prefix + ".attn.w_v", c, c);
    p.b_v = store.add(prefix + ".attn.b_v", 1, c, false);
    p.w_o = store.add(prefix + ".attn.w_o", c, c);
    p.b_o = store.add(prefix + ".attn.b_o", 1, c, false);
    p.ln2_g = store.add(prefix + ".ln2.g", 1, c, false);
    p.ln2_b = store.add(prefix + ".ln2.b", 1, c, false);
    p.w_m1 = store.add(prefix + ".mlp.w1", c, 4 * c);
    p.b_m1 = store.add(prefix + ".mlp.b1", 1, 4 * c, false);
    p.w_m2 = store.add(prefix + ".mlp.w2", 4 * c, c);
    p.b_m2 = store.add(prefix + ".mlp.b2", 1, c, false);
    return p;
  }

  void init(ParamStore<S>& store, Rng& rng, const ModelConfig&) const {
    store.row(ln1_g).setOnes();
    store.row(ln2_g).setOnes();
    fill_normal<S>(store.value(w_q), rng, 0.02);
    fill_normal<S>(store.value(w_k), rng, 0.02);
    fill_normal<S>(store.value(w_v), rng, 0.02);
    fill_normal<S>(store.value(w_o), rng, 0.02);
    fill_normal<S>(store.value(w_m1), rng, 0.02);
    fill_normal<S>(store.value(w_m2), rng, 0.02);
  }
};

template <typename S>
struct SpatialCache {
  MatX<S> x_in;
  LayerNormCache<S> ln1c, ln2c;
  MatX<S> xhat1;               // LN1 output
  MatX<S> q, k, v;             // [T*N, C]
  std::vector<MatX<S>> attn;   // index t*heads + h, each [N, N]
  MatX<S> attn_concat;         // heads concatenated A*V, [T*N, C]
  MatX<S> x_mid;               // after attention residual
  MatX<S> xhat2;               // LN2 output
  MatX<S> mlp_pre;             // [T*N, 4C]
};

/// Forward over a [T*N, C] grid; frames never interact. When
/// `capture_attention` is set, per-(frame, head) probability matrices are
/// appended to `*captured`.
template <typename S>
MatX<S> spatial_block_forward(const MatX<S>& tokens, const ParamStore<S>& store,
                              const SpatialBlockParams<S>& p, const ModelConfig& cfg,
                              Index n_tokens, bool capture_attention = false,
                              std::vector<MatX<S>>* captured = nullptr,
                              SpatialCache<S>* cache = nullptr) {
  require_shape(n_tokens > 0 && tokens.rows() % n_tokens == 0,
                "spatial_block_forward: bad token count");
  const Index t_len = tokens.rows() / n_tokens;
  const int heads = cfg.heads;
  const Index dh = cfg.width / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  LayerNormCache<S> ln1c;
  MatX<S> xhat1 = layer_norm<S>(tokens, store.row(p.ln1_g), store.row(p.ln1_b), &ln1c);
  MatX<S> q = linear<S>(xhat1, store.value(p.w_q), store.row(p.b_q));
  MatX<S> k = linear<S>(xhat1, store.value(p.w_k), store.row(p.b_k));
  MatX<S> v = linear<S>(xhat1, store.value(p.w_v), store.row(p.b_v));

  MatX<S> attn_concat(tokens.rows(), cfg.width);
  std::vector<MatX<S>> probs;
  if (cache) probs.reserve(static_cast<std::size_t>(t_len) * heads);
  for (Index t = 0; t < t_len; ++t) {
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.block(t * n_tokens, h * dh, n_tokens, dh);
      const auto kh = k.block(t * n_tokens, h * dh, n_tokens, dh);
      const auto vh = v.block(t * n_tokens, h * dh, n_tokens, dh);
      MatX<S> logits = (qh * kh.transpose()) * scale;
      MatX<S> prob = softmax_rows(logits);
      attn_concat.block(t * n_tokens, h * dh, n_tokens, dh).noalias() = prob * vh;
      if (capture_attention && captured) captured->push_back(prob);
      if (cache) probs.push_back(std::move(prob));
    }
  }
  MatX<S> x_mid = linear<S>(attn_concat, store.value(p.w_o), store.row(p.b_o));
  x_mid += tokens;

  LayerNormCache<S> ln2c;
  MatX<S> xhat2 = layer_norm<S>(x_mid, store.row(p.ln2_g), store.row(p.ln2_b), &ln2c);
  MatX<S> mlp_pre = linear<S>(xhat2, store.value(p.w_m1), store.row(p.b_m1));
  MatX<S> act = mlp_pre.unaryExpr([](S x) { return gelu(x); });
  MatX<S> out = linear<S>(act, store.value(p.w_m2), store.row(p.b_m2));
  out += x_mid;

  if (cache) {
    cache->x_in = tokens;
    cache->ln1c = std::move(ln1c);
    cache->ln2c = std::move(ln2c);
    cache->xhat1 = std::move(xhat1);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(probs);
    cache->attn_concat = std::move(attn_concat);
    cache->x_mid = std::move(x_mid);
    cache->xhat2 = std::move(xhat2);
    cache->mlp_pre = std::move(mlp_pre);
  }
  return out;
}

template <typename S>
MatX<S> spatial_block_backward(const MatX<S>& dout, const SpatialCache<S>& c,
                               ParamStore<S>& store, const SpatialBlockParams<S>& p,
                               const ModelConfig& cfg, Index n_tokens) {
  const Index t_len = c.x_in.rows() / n_tokens;
  const int heads = cfg.heads;
  const Index dh = cfg.width / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  // MLP
  MatX<S> act = c.mlp_pre.unaryExpr([](S x) { return gelu(x); });
  MatX<S> dact = linear_backward<S>(act, store.value(p.w_m2), dout, store.grad(p.w_m2),
                                    store.row_grad(p.b_m2));
  MatX<S> dpre =
      (dact.array() * c.mlp_pre.unaryExpr([](S x) { return gelu_grad(x); }).array()).matrix();
  MatX<S> dxhat2 = linear_backward<S>(c.xhat2, store.value(p.w_m1), dpre, store.grad(p.w_m1),
                                      store.row_grad(p.b_m1));
  MatX<S> dx_mid = layer_norm_backward<S>(c.ln2c, store.row(p.ln2_g), dxhat2,
                                          store.row_grad(p.ln2_g), store.row_grad(p.ln2_b));
  dx_mid += dout;  // MLP residual

  // attention output projection
  MatX<S> dconcat = linear_backward<S>(c.attn_concat, store.value(p.w_o), dx_mid,
                                       store.grad(p.w_o), store.row_grad(p.b_o));

  MatX<S> dq = MatX<S>::Zero(c.q.rows(), c.q.cols());
  MatX<S> dk = MatX<S>::Zero(c.k.rows(), c.k.cols());
  MatX<S> dv = MatX<S>::Zero(c.v.rows(), c.v.cols());
  for (Index t = 0; t < t_len; ++t) {
    for (int h = 0; h < heads; ++h) {
      const MatX<S>& prob = c.attn[static_cast<std::size_t>(t) * heads + h];
      const auto qh = c.q.block(t * n_tokens, h * dh, n_tokens, dh);
      const auto kh = c.k.block(t * n_tokens, h * dh, n_tokens, dh);
      const auto vh = c.v.block(t * n_tokens, h * dh, n_tokens, dh);
      const auto doh = dconcat.block(t * n_tokens, h * dh, n_tokens, dh);
      MatX<S> dprob = doh * vh.transpose();
      dv.block(t * n_tokens, h * dh, n_tokens, dh).noalias() = prob.transpose() * doh;
      MatX<S> dlogits = softmax_backward_rows(prob, dprob) * scale;
      dq.block(t * n_tokens, h * dh, n_tokens, dh).noalias() = dlogits * kh;
      dk.block(t * n_tokens, h * dh, n_tokens, dh).noalias() = dlogits.transpose() * qh;
    }
  }

  MatX<S> dxhat1 = linear_backward<S>(c.xhat1, store.value(p.w_q), dq, store.grad(p.w_q),
                                      store.row_grad(p.b_q));
  dxhat1 += linear_backward<S>(c.xhat1, store.value(p.w_k), dk, store.grad(p.w_k),
                               store.row_grad(p.b_k));
  dxhat1 += linear_backward<S>(c.xhat1, store.value(p.w_v), dv, store.grad(p.w_v),
                               store.row_grad(p.b_v));
  MatX<S> dx = layer_norm_backward<S>(c.ln1c, store.row(p.ln1_g), dxhat1,
                                      store.row_grad(p.ln1_g), store.row_grad(p.ln1_b));
  dx += dx_mid;  // attention residual
  return dx;
}

/// The four slices of one [N, N] attention matrix under the TokenGrid layout.
template <typename S>
struct AttentionQuadrants {
  MatX<S> point_to_image;  // [Q, hw]
  MatX<S> point_to_point;  // [Q, Q]
  MatX<S> image_to_image;  // [hw, hw]
  MatX<S> image_to_point;  // [hw, Q]
};

template <typename S>
AttentionQuadrants<S> split_attention_quadrants(const MatX<S>& attn, int hw, int q) {
  require_shape(attn.rows() == attn.cols() && attn.rows() == hw + q,
                "split_attention_quadrants: layout mismatch");
  AttentionQuadrants<S> out;
  out.image_to_image = attn.block(0, 0, hw, hw);
  out.image_to_point = attn.block(0, hw, hw, q);
  out.point_to_image = attn.block(hw, 0, q, hw);
  out.point_to_point = attn.block(hw, hw, q, q);
  return out;
}

// ---------------------------------------------------------------------------
// Temporal attention ablation: causal attention over T per tube with rotary
// position embeddings; drop-in offline substitute for the recurrent block
// (same no-norm residual structure, no streaming support).
// ---------------------------------------------------------------------------

template <typename S>
struct TemporalAttentionParams {
  ParamId w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;

  static TemporalAttentionParams build(ParamStore<S>& store, const std::string& prefix,
                                       const ModelConfig& cfg) {
    const int c = cfg.width;
    TemporalAttentionParams p;
    p.w_q = store.add(prefix + ".w_q", c, c);
    p.b_q = store.add(prefix + ".b_q", 1, c, false);
    p.w_k = store.add(prefix + ".w_k", c, c);
    p.b_k = store.add(prefix + ".b_k", 1, c, false);
    p.w_v = store.add(prefix + ".w_v", c, c);
    p.b_v = store.add(prefix + ".b_v", 1, c, false);
    p.w_o = store.add(prefix + ".w_o", c, c);
    p.b_o = store.add(prefix + ".b_o", 1, c, false);
    return p;
  }

  void init(ParamStore<S>& store, Rng& rng, const ModelConfig&) const {
    fill_normal<S>(store.value(w_q), rng, 0.02);
    fill_normal<S>(store.value(w_k), rng, 0.02);
    fill_normal<S>(store.value(w_v), rng, 0.02);
    fill_normal<S>(store.value(w_o), rng, 0.02);
  }
};

namespace detail {

constexpr double kRotaryBase = 10000.0;

/// Rotates pair (2k, 2k+1) of every head-dim column block by t * base^(-2k/dh).
/// `sign` = -1 undoes the rotation (used in backward).
template <typename S>
void apply_rotary(MatX<S>& x, Index t_pos, Index dh, S sign) {
  for (Index c0 = 0; c0 < x.cols(); c0 += dh) {
    for (Index k = 0; 2 * k + 1 < dh; ++k) {
      const double theta =
          static_cast<double>(t_pos) * std::pow(kRotaryBase, -2.0 * k / static_cast<double>(dh));
      const S cs = static_cast<S>(std::cos(theta)), sn = sign * static_cast<S>(std::sin(theta));
      for (Index r = 0; r < x.rows(); ++r) {
        const S a = x(r, c0 + 2 * k), b = x(r, c0 + 2 * k + 1);
        x(r, c0 + 2 * k) = a * cs - b * sn;
        x(r, c0 + 2 * k + 1) = a * sn + b * cs;
      }
    }
  }
}

}  // namespace detail

template <typename S>
struct TemporalAttentionCache {
  MatX<S> x_in;
  MatX<S> q, k, v;            // [T*N, C]; q and k already rotated
  std::vector<MatX<S>> attn;  // index tube*heads + h, each [T, T] causal
  MatX<S> attn_concat;
};

/// Causal attention over the T dimension treating tubes as batch. Offline
/// only; the streaming path rejects this block kind.
template <typename S>
MatX<S> temporal_attention_forward(const MatX<S>& tokens, const ParamStore<S>& store,
                                   const TemporalAttentionParams<S>& p, const ModelConfig& cfg,
                                   Index n_tubes, TemporalAttentionCache<S>* cache = nullptr) {
  require_shape(n_tubes > 0 && tokens.rows() % n_tubes == 0,
                "temporal_attention_forward: bad tube count");
  const Index t_len = tokens.rows() / n_tubes;
  const int heads = cfg.heads;
  const Index dh = cfg.width / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  MatX<S> q = linear<S>(tokens, store.value(p.w_q), store.row(p.b_q));
  MatX<S> k = linear<S>(tokens, store.value(p.w_k), store.row(p.b_k));
  MatX<S> v = linear<S>(tokens, store.value(p.w_v), store.row(p.b_v));
  for (Index t = 0; t < t_len; ++t) {
    MatX<S> qt = q.middleRows(t * n_tubes, n_tubes);
    MatX<S> kt = k.middleRows(t * n_tubes, n_tubes);
    detail::apply_rotary(qt, t, dh, S(1));
    detail::apply_rotary(kt, t, dh, S(1));
    q.middleRows(t * n_tubes, n_tubes) = qt;
    k.middleRows(t * n_tubes, n_tubes) = kt;
  }

  MatX<S> attn_concat(tokens.rows(), cfg.width);
  std::vector<MatX<S>> probs;
  if (cache) probs.reserve(static_cast<std::size_t>(n_tubes) * heads);
  MatX<S> qt(t_len, dh), kt(t_len, dh), vt(t_len, dh);
  for (Index tube = 0; tube < n_tubes; ++tube) {
    for (int h = 0; h < heads; ++h) {
      for (Index t = 0; t < t_len; ++t) {
        qt.row(t) = q.block(t * n_tubes + tube, h * dh, 1, dh);
        kt.row(t) = k.block(t * n_tubes + tube, h * dh, 1, dh);
        vt.row(t) = v.block(t * n_tubes + tube, h * dh, 1, dh);
      }
      MatX<S> logits = (qt * kt.transpose()) * scale;
      for (Index r = 0; r < t_len; ++r)
        for (Index s = r + 1; s < t_len; ++s)
          logits(r, s) = -std::numeric_limits<S>::infinity();
      MatX<S> prob = softmax_rows(logits);
      MatX<S> oh = prob * vt;
      for (Index t = 0; t < t_len; ++t)
        attn_concat.block(t * n_tubes + tube, h * dh, 1, dh) = oh.row(t);
      if (cache) probs.push_back(std::move(prob));
    }
  }
  MatX<S> out = linear<S>(attn_concat, store.value(p.w_o), store.row(p.b_o));
  out += tokens;
  if (cache) {
    cache->x_in = tokens;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(probs);
    cache->attn_concat = std::move(attn_concat);
  }
  return out;
}

template <typename S>
MatX<S> temporal_attention_backward(const MatX<S>& dout, const TemporalAttentionCache<S>& c,
                                    ParamStore<S>& store, const TemporalAttentionParams<S>& p,
                                    const ModelConfig& cfg, Index n_tubes) {
  const Index t_len = c.x_in.rows() / n_tubes;
  const int heads = cfg.heads;
  const Index dh = cfg.width / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  MatX<S> dconcat = linear_backward<S>(c.attn_concat, store.value(p.w_o), dout, store.grad(p.w_o),
                                       store.row_grad(p.b_o));

  MatX<S> dq = MatX<S>::Zero(c.q.rows(), c.q.cols());
  MatX<S> dk = MatX<S>::Zero(c.k.rows(), c.k.cols());
  MatX<S> dv = MatX<S>::Zero(c.v.rows(), c.v.cols());
  MatX<S> qt(t_len, dh), kt(t_len, dh), vt(t_len, dh), dot(t_len, dh);
  for (Index tube = 0; tube < n_tubes; ++tube) {
    for (int h = 0; h < heads; ++h) {
      const MatX<S>& prob = c.attn[static_cast<std::size_t>(tube) * heads + h];
      for (Index t = 0; t < t_len; ++t) {
        qt.row(t) = c.q.block(t * n_tubes + tube, h * dh, 1, dh);
        kt.row(t) = c.k.block(t * n_tubes + tube, h * dh, 1, dh);
        vt.row(t) = c.v.block(t * n_tubes + tube, h * dh, 1, dh);
        dot.row(t) = dconcat.block(t * n_tubes + tube, h * dh, 1, dh);
      }
      MatX<S> dprob = dot * vt.transpose();
      MatX<S> dvt = prob.transpose() * dot;
      MatX<S> dlogits = softmax_backward_rows(prob, dprob) * scale;
      MatX<S> dqt = dlogits * kt;
      MatX<S> dkt = dlogits.transpose() * qt;
      for (Index t = 0; t < t_len; ++t) {
        dq.block(t * n_tubes + tube, h * dh, 1, dh) = dqt.row(t);
        dk.block(t * n_tubes + tube, h * dh, 1, dh) = dkt.row(t);
        dv.block(t * n_tubes + tube, h * dh, 1, dh) = dvt.row(t);
      }
    }
  }
  for (Index t = 0; t < t_len; ++t) {
    MatX<S> dqt = dq.middleRows(t * n_tubes, n_tubes);
    MatX<S> dkt = dk.middleRows(t * n_tubes, n_tubes);
    detail::apply_rotary(dqt, t, dh, S(-1));
    detail::apply_rotary(dkt, t, dh, S(-1));
    dq.middleRows(t * n_tubes, n_tubes) = dqt;
    dk.middleRows(t * n_tubes, n_tubes) = dkt;
  }

  MatX<S> dx = linear_backward<S>(c.x_in, store.value(p.w_q), dq, store.grad(p.w_q),
                                  store.row_grad(p.b_q));
  dx += linear_backward<S>(c.x_in, store.value(p.w_k), dk, store.grad(p.w_k),
                           store.row_grad(p.b_k));
  dx += linear_backward<S>(c.x_in, store.value(p.w_v), dv, store.grad(p.w_v),
                           store.row_grad(p.b_v));
  dx += dout;  // residual
  return dx;
}

}  // namespace tapmicro
