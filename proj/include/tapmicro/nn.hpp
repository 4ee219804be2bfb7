// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Dense building blocks with hand-written reverse-mode backward passes.
// Layout convention: activations are [rows, channels] with one token per row;
// weights are [in, out] so forward is a single `x * w`.
#pragma once

#include <cmath>
#include <utility>

#include "tapmicro/core.hpp"

namespace tapmicro {

template <typename S>
MatX<S> linear(const MatX<S>& x, const MatX<S>& w, const RowVecX<S>& b) {
  require_shape(x.cols() == w.rows() && w.cols() == b.cols(), "linear: shape mismatch");
  MatX<S> y = x * w;
  y.rowwise() += b;
  return y;
}

template <typename S>
MatX<S> linear_nobias(const MatX<S>& x, const MatX<S>& w) {
  require_shape(x.cols() == w.rows(), "linear: shape mismatch");
  return x * w;
}

/// Accumulates dW, db and returns dX.
template <typename S, typename DW, typename DB>
MatX<S> linear_backward(const MatX<S>& x, const MatX<S>& w, const MatX<S>& dy, DW&& dw, DB&& db) {
  dw.noalias() += x.transpose() * dy;
  db.noalias() += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename S>
S sigmoid(S v) {
  return v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
}

template <typename S>
S softplus(S v) {
  return v > S(20) ? v : std::log1p(std::exp(v));
}

template <typename S>
S gelu(S v) {
  return S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2)));
}

template <typename S>
S gelu_grad(S v) {
  const S cdf = S(0.5) * (S(1) + std::erf(v * S(M_SQRT1_2)));
  const S pdf = std::exp(S(-0.5) * v * v) * S(0.3989422804014327);
  return cdf + v * pdf;
}

template <typename S>
struct LayerNormCache {
  MatX<S> xhat;  // normalized input
  VecX<S> istd;  // per-row inverse stddev
};

/// Row-wise layer normalization: y = xhat .* gamma .+ beta.
template <typename S>
MatX<S> layer_norm(const MatX<S>& x, const RowVecX<S>& gamma, const RowVecX<S>& beta,
                   LayerNormCache<S>* cache = nullptr) {
  VecX<S> mean = x.rowwise().mean();
  MatX<S> xhat = x.colwise() - mean;
  VecX<S> istd = (xhat.array().square().rowwise().mean() + S(1e-6)).rsqrt();
  xhat.array().colwise() *= istd.array();
  MatX<S> y = xhat.array().rowwise() * gamma.array();
  y.rowwise() += beta;
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->istd = std::move(istd);
  }
  return y;
}

template <typename S, typename DG, typename DB>
MatX<S> layer_norm_backward(const LayerNormCache<S>& c, const RowVecX<S>& gamma, const MatX<S>& dy,
                            DG&& dgamma, DB&& dbeta) {
  dgamma.noalias() += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta.noalias() += dy.colwise().sum();
  MatX<S> g = dy.array().rowwise() * gamma.array();
  VecX<S> gmean = g.rowwise().mean();
  VecX<S> gxmean = (g.array() * c.xhat.array()).rowwise().mean();
  MatX<S> dx = ((g.colwise() - gmean).array() - c.xhat.array().colwise() * gxmean.array());
  dx.array().colwise() *= c.istd.array();
  return dx;
}

/// Row-wise softmax, shifted by the row max.
template <typename S>
MatX<S> softmax_rows(const MatX<S>& z) {
  MatX<S> p = (z.colwise() - z.rowwise().maxCoeff()).array().exp();
  VecX<S> sums = p.rowwise().sum();
  p.array().colwise() /= sums.array();
  return p;
}

/// dZ given the softmax output p and dP.
template <typename S>
MatX<S> softmax_backward_rows(const MatX<S>& p, const MatX<S>& dp) {
  VecX<S> dot = (p.array() * dp.array()).rowwise().sum();
  MatX<S> dz = (dp.colwise() - dot).array() * p.array();
  return dz;
}

}  // namespace tapmicro
