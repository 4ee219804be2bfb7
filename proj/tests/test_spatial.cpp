// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "tapmicro/spatial.hpp"

using namespace tapmicro;

namespace {

ModelConfig sp_cfg(int width = 16, int heads = 2) {
  ModelConfig cfg;
  cfg.width = width;
  cfg.heads = heads;
  return cfg;
}

template <typename S>
struct SpBlock {
  ParamStore<S> store;
  SpatialBlockParams<S> params;
  ModelConfig cfg;
};

template <typename S>
SpBlock<S> make_sp(std::uint64_t seed, const ModelConfig& cfg) {
  SpBlock<S> b;
  b.cfg = cfg;
  b.params = SpatialBlockParams<S>::build(b.store, "sp", cfg);
  Rng rng(seed);
  b.params.init(b.store, rng, cfg);
  return b;
}

/// Scalar-loop multi-head attention + MLP reference.
template <typename S>
MatX<S> reference_spatial(const SpBlock<S>& b, const MatX<S>& tokens, Index n_tokens) {
  const ModelConfig& cfg = b.cfg;
  const Index t_len = tokens.rows() / n_tokens;
  const int heads = cfg.heads;
  const Index dh = cfg.width / heads;
  auto ln = [&](const MatX<S>& x, ParamId g, ParamId be) {
    MatX<S> out = x;
    const auto gamma = b.store.row(g);
    const auto beta = b.store.row(be);
    for (Index r = 0; r < x.rows(); ++r) {
      const S mu = x.row(r).mean();
      S var = 0;
      for (Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
      var /= x.cols();
      const S istd = S(1) / std::sqrt(var + S(1e-6));
      for (Index c = 0; c < x.cols(); ++c)
        out(r, c) = (x(r, c) - mu) * istd * gamma(c) + beta(c);
    }
    return out;
  };
  MatX<S> xh = ln(tokens, b.params.ln1_g, b.params.ln1_b);
  MatX<S> q = linear<S>(xh, b.store.value(b.params.w_q), b.store.row(b.params.b_q));
  MatX<S> k = linear<S>(xh, b.store.value(b.params.w_k), b.store.row(b.params.b_k));
  MatX<S> v = linear<S>(xh, b.store.value(b.params.w_v), b.store.row(b.params.b_v));
  MatX<S> concat = MatX<S>::Zero(tokens.rows(), cfg.width);
  for (Index t = 0; t < t_len; ++t)
    for (int h = 0; h < heads; ++h)
      for (Index i = 0; i < n_tokens; ++i) {
        VecX<S> logits(n_tokens);
        for (Index j = 0; j < n_tokens; ++j) {
          S dot = 0;
          for (Index d = 0; d < dh; ++d)
            dot += q(t * n_tokens + i, h * dh + d) * k(t * n_tokens + j, h * dh + d);
          logits(j) = dot / std::sqrt(static_cast<S>(dh));
        }
        VecX<S> p = (logits.array() - logits.maxCoeff()).exp();
        p /= p.sum();
        for (Index d = 0; d < dh; ++d) {
          S acc = 0;
          for (Index j = 0; j < n_tokens; ++j) acc += p(j) * v(t * n_tokens + j, h * dh + d);
          concat(t * n_tokens + i, h * dh + d) = acc;
        }
      }
  MatX<S> mid =
      linear<S>(concat, b.store.value(b.params.w_o), b.store.row(b.params.b_o)) + tokens;
  MatX<S> xh2 = ln(mid, b.params.ln2_g, b.params.ln2_b);
  MatX<S> hpre = linear<S>(xh2, b.store.value(b.params.w_m1), b.store.row(b.params.b_m1));
  MatX<S> act = hpre.unaryExpr([](S x) { return gelu(x); });
  return linear<S>(act, b.store.value(b.params.w_m2), b.store.row(b.params.b_m2)) + mid;
}

}  // namespace

TEST_SUITE("spatial") {
  TEST_CASE("identical frames give identical outputs") {
    auto b = make_sp<double>(1, sp_cfg());
    const Index n = 5;
    MatX<double> frame = MatX<double>::Random(n, b.cfg.width);
    MatX<double> tokens(2 * n, b.cfg.width);
    tokens.topRows(n) = frame;
    tokens.bottomRows(n) = frame;
    MatX<double> out = spatial_block_forward(tokens, b.store, b.params, b.cfg, n);
    CHECK((out.topRows(n) - out.bottomRows(n)).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("single token attends to itself with weight one") {
    auto b = make_sp<double>(2, sp_cfg());
    MatX<double> tokens = MatX<double>::Random(1, b.cfg.width);
    std::vector<MatX<double>> maps;
    spatial_block_forward(tokens, b.store, b.params, b.cfg, 1, true, &maps);
    REQUIRE(maps.size() == static_cast<std::size_t>(b.cfg.heads));
    for (const auto& m : maps) {
      REQUIRE(m.rows() == 1);
      CHECK(m(0, 0) == doctest::Approx(1.0));
    }
  }

  TEST_CASE("matches a scalar-loop reference") {
    auto bd = make_sp<double>(3, sp_cfg());
    MatX<double> tokens = MatX<double>::Random(3 * 6, bd.cfg.width);
    MatX<double> out = spatial_block_forward(tokens, bd.store, bd.params, bd.cfg, 6);
    MatX<double> ref = reference_spatial(bd, tokens, 6);
    CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-12);

    auto bf = make_sp<float>(3, sp_cfg());
    MatX<float> tf = MatX<float>::Random(3 * 6, bf.cfg.width);
    MatX<float> outf = spatial_block_forward(tf, bf.store, bf.params, bf.cfg, 6);
    MatX<float> reff = reference_spatial(bf, tf, 6);
    CHECK((outf - reff).cwiseAbs().maxCoeff() < 1e-5f);
  }

  TEST_CASE("attention rows are probability vectors") {
    auto b = make_sp<double>(4, sp_cfg());
    MatX<double> tokens = MatX<double>::Random(2 * 7, b.cfg.width);
    std::vector<MatX<double>> maps;
    spatial_block_forward(tokens, b.store, b.params, b.cfg, 7, true, &maps);
    for (const auto& m : maps) {
      CHECK((m.array() >= 0).all());
      for (Index r = 0; r < m.rows(); ++r)
        CHECK(m.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("permutation equivariance over point tokens") {
    auto b = make_sp<double>(5, sp_cfg());
    const int hw = 4, q = 3, n = hw + q;
    MatX<double> tokens = MatX<double>::Random(n, b.cfg.width);
    MatX<double> out = spatial_block_forward(tokens, b.store, b.params, b.cfg, n);
    MatX<double> perm = tokens;
    perm.row(hw + 0) = tokens.row(hw + 2);
    perm.row(hw + 2) = tokens.row(hw + 0);
    MatX<double> out_p = spatial_block_forward(perm, b.store, b.params, b.cfg, n);
    CHECK((out_p.row(hw + 0) - out.row(hw + 2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out_p.row(hw + 2) - out.row(hw + 0)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out_p.topRows(hw) - out.topRows(hw)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("quadrant split") {
    const int hw = 3, q = 2, n = hw + q;
    MatX<double> ident = MatX<double>::Identity(n, n);
    auto qa = split_attention_quadrants(ident, hw, q);
    CHECK(qa.point_to_image.cwiseAbs().maxCoeff() == 0.0);
    CHECK(qa.point_to_point.diagonal().sum() == doctest::Approx(2.0));

    MatX<double> unif = MatX<double>::Constant(n, n, 1.0 / n);
    auto qb = split_attention_quadrants(unif, hw, q);
    CHECK((qb.image_to_point.array() == 1.0 / n).all());
    CHECK((qb.point_to_image.array() == 1.0 / n).all());

    // random row-stochastic matrix: quadrant rows reassemble to 1
    Rng rng(6);
    MatX<double> r(n, n);
    fill_normal<double>(r, rng, 1.0);
    r = r.array().abs();
    for (Index i = 0; i < n; ++i) r.row(i) /= r.row(i).sum();
    auto qc = split_attention_quadrants(r, hw, q);
    for (Index i = 0; i < hw; ++i)
      CHECK(qc.image_to_image.row(i).sum() + qc.image_to_point.row(i).sum() ==
            doctest::Approx(1.0));
    for (Index i = 0; i < q; ++i)
      CHECK(qc.point_to_image.row(i).sum() + qc.point_to_point.row(i).sum() ==
            doctest::Approx(1.0));

    CHECK_THROWS_AS(split_attention_quadrants(MatX<double>(MatX<double>::Zero(4, 5)), 3, 2), ShapeError);
  }

  TEST_CASE("temporal attention: T=1 is the value-projection residual path") {
    ModelConfig cfg = sp_cfg();
    ParamStore<double> store;
    auto params = TemporalAttentionParams<double>::build(store, "ta", cfg);
    Rng rng(7);
    params.init(store, rng, cfg);
    MatX<double> tokens = MatX<double>::Random(3, cfg.width);  // T=1, 3 tubes
    MatX<double> out = temporal_attention_forward(tokens, store, params, cfg, 3);
    MatX<double> v = linear<double>(tokens, store.value(params.w_v), store.row(params.b_v));
    MatX<double> expect =
        linear<double>(v, store.value(params.w_o), store.row(params.b_o)) + tokens;
    CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("temporal attention is causal") {
    ModelConfig cfg = sp_cfg();
    ParamStore<double> store;
    auto params = TemporalAttentionParams<double>::build(store, "ta", cfg);
    Rng rng(8);
    params.init(store, rng, cfg);
    const int n = 2, t_len = 5;
    MatX<double> tokens = MatX<double>::Random(t_len * n, cfg.width);
    MatX<double> out = temporal_attention_forward(tokens, store, params, cfg, n);
    MatX<double> tokens2 = tokens;
    tokens2.middleRows(3 * n, n).setConstant(9.0);  // perturb frame 3
    MatX<double> out2 = temporal_attention_forward(tokens2, store, params, cfg, n);
    CHECK((out.topRows(3 * n) - out2.topRows(3 * n)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.middleRows(3 * n, n) - out2.middleRows(3 * n, n)).cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("temporal attention matches a scalar-loop causal reference") {
    ModelConfig cfg = sp_cfg(16, 2);
    ParamStore<double> store;
    auto params = TemporalAttentionParams<double>::build(store, "ta", cfg);
    Rng rng(9);
    params.init(store, rng, cfg);
    const int n = 3, t_len = 4, heads = cfg.heads;
    const Index dh = cfg.width / heads;
    MatX<double> tokens = MatX<double>::Random(t_len * n, cfg.width);
    MatX<double> out = temporal_attention_forward(tokens, store, params, cfg, n);

    MatX<double> q = linear<double>(tokens, store.value(params.w_q), store.row(params.b_q));
    MatX<double> k = linear<double>(tokens, store.value(params.w_k), store.row(params.b_k));
    MatX<double> v = linear<double>(tokens, store.value(params.w_v), store.row(params.b_v));
    auto rot = [&](MatX<double>& m, int t) {
      for (Index c0 = 0; c0 < m.cols(); c0 += dh)
        for (Index kk = 0; 2 * kk + 1 < dh; ++kk) {
          const double th = t * std::pow(10000.0, -2.0 * kk / static_cast<double>(dh));
          for (Index r = 0; r < m.rows(); ++r) {
            const double a = m(r, c0 + 2 * kk), bb = m(r, c0 + 2 * kk + 1);
            m(r, c0 + 2 * kk) = a * std::cos(th) - bb * std::sin(th);
            m(r, c0 + 2 * kk + 1) = a * std::sin(th) + bb * std::cos(th);
          }
        }
    };
    for (int t = 0; t < t_len; ++t) {
      MatX<double> qt = q.middleRows(t * n, n), kt = k.middleRows(t * n, n);
      rot(qt, t);
      rot(kt, t);
      q.middleRows(t * n, n) = qt;
      k.middleRows(t * n, n) = kt;
    }
    MatX<double> concat = MatX<double>::Zero(t_len * n, cfg.width);
    for (int tube = 0; tube < n; ++tube)
      for (int h = 0; h < heads; ++h)
        for (int ti = 0; ti < t_len; ++ti) {
          VecX<double> logits(ti + 1);
          for (int tj = 0; tj <= ti; ++tj) {
            double dot = 0;
            for (Index d = 0; d < dh; ++d)
              dot += q(ti * n + tube, h * dh + d) * k(tj * n + tube, h * dh + d);
            logits(tj) = dot / std::sqrt(static_cast<double>(dh));
          }
          VecX<double> p = (logits.array() - logits.maxCoeff()).exp();
          p /= p.sum();
          for (Index d = 0; d < dh; ++d) {
            double acc = 0;
            for (int tj = 0; tj <= ti; ++tj) acc += p(tj) * v(tj * n + tube, h * dh + d);
            concat(ti * n + tube, h * dh + d) = acc;
          }
        }
    MatX<double> expect =
        linear<double>(concat, store.value(params.w_o), store.row(params.b_o)) + tokens;
    CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}
