// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "tapmicro/heads.hpp"

using namespace tapmicro;

namespace {

ModelConfig head_cfg() {
  ModelConfig cfg;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.bins = 8;
  cfg.softargmax_delta = 3;
  cfg.temperature = 2.0;
  cfg.input_height = 8;
  cfg.input_width = 8;
  cfg.head_hidden = 12;
  return cfg;
}

/// Direct-summation oracle for the truncated soft-argmax.
double trunc_oracle(const VecX<double>& p, int delta, double extent) {
  const Index n = p.size();
  Index jmax = 0;
  for (Index j = 1; j < n; ++j)
    if (p(j) > p(jmax)) jmax = j;
  double num = 0, den = 0;
  for (Index j = 0; j < n; ++j) {
    if (std::abs(static_cast<double>(j - jmax)) <= delta) {
      num += p(j) * static_cast<double>(j);
      den += p(j);
    }
  }
  return (num / den) * extent / static_cast<double>(n);
}

}  // namespace

TEST_SUITE("heads") {
  TEST_CASE("trunc_softargmax basics") {
    VecX<double> onehot = VecX<double>::Zero(8);
    onehot(3) = 1.0;
    CHECK(trunc_softargmax<double>(onehot, 2, 8.0) == doctest::Approx(3.0));

    VecX<double> unif = VecX<double>::Constant(8, 0.125);
    CHECK(trunc_softargmax<double>(unif, 8, 8.0) == doctest::Approx(3.5));

    VecX<double> p(8);
    p << 0.1, 0, 0, 0.4, 0.5, 0, 0, 0;
    CHECK(trunc_softargmax<double>(p, 1, 8.0) == doctest::Approx(32.0 / 9.0).epsilon(1e-12));
  }

  TEST_CASE("trunc_softargmax matches the direct-summation oracle") {
    Rng rng(1);
    for (int delta : {0, 1, 3, 8}) {
      for (int it = 0; it < 300; ++it) {
        VecX<double> p(8);
        for (int j = 0; j < 8; ++j) p(j) = uniform<double>(rng, 0.0, 1.0);
        p /= p.sum();
        const double got = trunc_softargmax<double>(p, delta, 8.0);
        CHECK(got == doctest::Approx(trunc_oracle(p, delta, 8.0)).epsilon(1e-12));
        // stays within delta bins of the argmax coordinate and inside range
        Index jmax = 0;
        for (Index j = 1; j < 8; ++j)
          if (p(j) > p(jmax)) jmax = j;
        CHECK(got >= 0.0);
        CHECK(got <= 8.0);
        CHECK(std::abs(got - jmax * 1.0) <= (delta + 1e-12) * 1.0);
        // invariant to positive rescaling
        VecX<double> p2 = p * 37.5;
        CHECK(trunc_softargmax<double>(p2, delta, 8.0) == doctest::Approx(got).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("trunc_softargmax breaks argmax ties toward the lowest index") {
    VecX<double> p = VecX<double>::Zero(8);
    p(2) = 0.5;
    p(6) = 0.5;
    CHECK(trunc_softargmax<double>(p, 0, 8.0) == doctest::Approx(2.0));
  }

  TEST_CASE("one_hot_target") {
    CHECK(one_hot_target(0.0, 8, 8.0) == 0);
    CHECK(one_hot_target(8.0, 8, 8.0) == 7);
    CHECK(one_hot_target(3.7, 8, 8.0) == 3);
    CHECK_THROWS_AS(one_hot_target(-0.1, 8, 8.0), ConfigError);
  }

  TEST_CASE("visibility loss") {
    CHECK(visibility_loss(0.0, 0.0) == doctest::Approx(std::log(2.0)));
    CHECK(visibility_loss(0.0, 1.0) == doctest::Approx(std::log(2.0)));
    CHECK(visibility_loss(30.0, 1.0) < 1e-10);
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
      const double z = uniform<double>(rng, -5.0, 5.0);
      const double y = uniform_int(rng, 0, 1);
      const double s = 1.0 / (1.0 + std::exp(-z));
      const double direct = -y * std::log(s) - (1 - y) * std::log(1 - s);
      CHECK(visibility_loss(z, y) == doctest::Approx(direct).epsilon(1e-9));
      CHECK(visibility_loss_grad(z, y) == doctest::Approx(s - y).epsilon(1e-12));
    }
  }

  TEST_CASE("uncertainty occlusion rule") {
    VecX<double> onehot = VecX<double>::Zero(32);
    onehot(10) = 1.0;
    double mass = 0;
    CHECK_FALSE(uncertainty_occlusion<double>(onehot, onehot, 10.0, 10.0, 1.0, 32, 32, 0.9,
                                              &mass));
    CHECK(mass == doctest::Approx(1.0));

    VecX<double> unif = VecX<double>::Constant(32, 1.0 / 32);
    const double ux = trunc_softargmax<double>(unif, 32, 32.0);
    CHECK(uncertainty_occlusion<double>(unif, unif, ux, ux, 1.0, 32, 32, 0.9, &mass));
    CHECK(mass < 0.5);

    CHECK(uncertainty_occlusion<double>(onehot, onehot, 10.0, 10.0, 1.0, 32, 32, 0.1, &mass));
  }

  TEST_CASE("occlusion mass matches exhaustive bin summation") {
    Rng rng(3);
    for (int it = 0; it < 200; ++it) {
      const int n = uniform_int(rng, 2, 16);
      VecX<double> px(n), py(n);
      for (int j = 0; j < n; ++j) {
        px(j) = uniform<double>(rng, 0.0, 1.0);
        py(j) = uniform<double>(rng, 0.0, 1.0);
      }
      px /= px.sum();
      py /= py.sum();
      const double extent = 16.0, radius = uniform<double>(rng, 0.5, 4.0);
      const double dx = uniform<double>(rng, 0.0, extent), dy = uniform<double>(rng, 0.0, extent);
      double mass = 0;
      uncertainty_occlusion<double>(px, py, dx, dy, radius, extent, extent, 0.9, &mass);
      double mx = 0, my = 0;
      for (int j = 0; j < n; ++j) {
        if (std::abs(j * extent / n - dx) <= radius) mx += px(j);
        if (std::abs(j * extent / n - dy) <= radius) my += py(j);
      }
      CHECK(mass == doctest::Approx(mx * my).epsilon(1e-12));
    }
  }

  TEST_CASE("coordinate head with zero parameters is uniform") {
    ModelConfig cfg = head_cfg();
    ParamStore<double> store;
    HeadParams<double> hp = HeadParams<double>::build(store, cfg);
    // all weights stay zero
    HeadCache<double> hc;
    heads_forward(MatX<double>::Random(3, cfg.width).eval(), store, hp, hc);
    CHECK(hc.logits.cwiseAbs().maxCoeff() == 0.0);  // uniform distribution after softmax
  }

  TEST_CASE("layer_loss values: perfect and uniform predictions") {
    ModelConfig cfg = head_cfg();
    LossWeights w;
    // one cell, visible, masked-in
    TrackTargets<double> t;
    t.x = {4.25};
    t.y = {2.0};
    t.vis_label = {1.0};
    t.coord_mask = {1};

    // uniform logits: CE per axis = ln(8); vis logit 0 -> ln 2
    MatX<double> logits = MatX<double>::Zero(1, 2 * cfg.bins);
    MatX<double> vlogit = MatX<double>::Zero(1, 1);
    LossBreakdown lb = layer_loss(logits, vlogit, t, cfg, w);
    CHECK(lb.ce == doctest::Approx(2.0 * std::log(8.0)).epsilon(1e-12));
    CHECK(lb.vis == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // near-one-hot logits at the target bins, decoded coordinate at bin edge
    MatX<double> sharp = MatX<double>::Constant(1, 2 * cfg.bins, -300.0);
    sharp(0, one_hot_target(t.x[0], cfg.bins, 8.0)) = 300.0;
    sharp(0, cfg.bins + one_hot_target(t.y[0], cfg.bins, 8.0)) = 300.0;
    MatX<double> vsharp = MatX<double>::Constant(1, 1, 300.0);
    LossBreakdown lb2 = layer_loss(sharp, vsharp, t, cfg, w);
    CHECK(lb2.ce < 1e-9);
    CHECK(lb2.vis < 1e-9);
    // Huber: decoded x = 4.0 vs target 4.25 -> 0.5*0.25^2; y exact
    CHECK(lb2.huber == doctest::Approx(0.5 * 0.25 * 0.25).epsilon(1e-9));
  }

  TEST_CASE("layer_loss matches a scalar-loop oracle on random cells") {
    ModelConfig cfg = head_cfg();
    LossWeights w;
    Rng rng(5);
    const int cells = 6;
    MatX<double> logits(cells, 2 * cfg.bins);
    MatX<double> vlogit(cells, 1);
    fill_normal<double>(logits, rng, 1.0);
    fill_normal<double>(vlogit, rng, 1.0);
    TrackTargets<double> t;
    for (int c = 0; c < cells; ++c) {
      t.x.push_back(uniform<double>(rng, 0.0, 8.0));
      t.y.push_back(uniform<double>(rng, 0.0, 8.0));
      t.vis_label.push_back(uniform_int(rng, 0, 1));
      t.coord_mask.push_back(c % 3 != 0);
    }
    LossBreakdown lb = layer_loss(logits, vlogit, t, cfg, w);

    // independent scalar evaluation
    double ce = 0, hub = 0, vis = 0;
    int unmasked = 0;
    for (int c = 0; c < cells; ++c) {
      const double z = vlogit(c, 0);
      vis += std::log(1 + std::exp(-std::abs(z))) + std::max(z, 0.0) - t.vis_label[c] * z;
      if (!t.coord_mask[c]) continue;
      ++unmasked;
      for (int axis = 0; axis < 2; ++axis) {
        VecX<double> zrow = logits.block(c, axis * cfg.bins, 1, cfg.bins).transpose();
        const double target = axis == 0 ? t.x[c] : t.y[c];
        const int jt = one_hot_target(target, cfg.bins, 8.0);
        double lse = 0;
        const double mx = zrow.maxCoeff();
        for (int j = 0; j < cfg.bins; ++j) lse += std::exp(zrow(j) - mx);
        ce += mx + std::log(lse) - zrow(jt);
        VecX<double> probs = ((zrow.array() - mx) / cfg.temperature).exp();
        probs /= probs.sum();
        const double dec = trunc_oracle(probs, cfg.softargmax_delta, 8.0);
        const double err = dec - target, bw = 1.0;
        hub += std::abs(err) <= bw ? 0.5 * err * err : bw * (std::abs(err) - 0.5 * bw);
      }
    }
    CHECK(lb.ce == doctest::Approx(ce / unmasked).epsilon(1e-9));
    CHECK(lb.huber == doctest::Approx(hub / unmasked).epsilon(1e-9));
    CHECK(lb.vis == doctest::Approx(vis / cells).epsilon(1e-9));
    CHECK(lb.total ==
          doctest::Approx(w.ce * ce / unmasked + w.huber * hub / unmasked + w.vis * vis / cells)
              .epsilon(1e-9));
  }

  TEST_CASE("all-masked batch reduces to the visibility loss") {
    ModelConfig cfg = head_cfg();
    LossWeights w;
    MatX<double> logits = MatX<double>::Random(4, 2 * cfg.bins);
    MatX<double> vlogit = MatX<double>::Random(4, 1);
    TrackTargets<double> t;
    t.x = {1, 2, 3, 4};
    t.y = {1, 2, 3, 4};
    t.vis_label = {0, 0, 0, 0};
    t.coord_mask = {0, 0, 0, 0};
    LossBreakdown lb = layer_loss(logits, vlogit, t, cfg, w);
    CHECK(lb.ce == 0.0);
    CHECK(lb.huber == 0.0);
    CHECK(lb.total == doctest::Approx(w.vis * lb.vis));
    // coordinate gradients are exactly zero
    MatX<double> dl, dv;
    layer_loss(logits, vlogit, t, cfg, w, 1.0, &dl, &dv);
    CHECK(dl.cwiseAbs().maxCoeff() == 0.0);
    CHECK(dv.cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("moving mass toward the target bin never increases CE") {
    ModelConfig cfg = head_cfg();
    LossWeights w;
    w.use_huber = false;
    TrackTargets<double> t;
    t.x = {4.5};
    t.y = {4.5};
    t.vis_label = {1.0};
    t.coord_mask = {1};
    MatX<double> vlogit = MatX<double>::Zero(1, 1);
    Rng rng(6);
    for (int it = 0; it < 50; ++it) {
      MatX<double> logits(1, 2 * cfg.bins);
      fill_normal<double>(logits, rng, 1.0);
      LossBreakdown before = layer_loss(logits, vlogit, t, cfg, w);
      MatX<double> shifted = logits;
      shifted(0, one_hot_target(4.5, cfg.bins, 8.0)) += 0.5;
      shifted(0, cfg.bins + one_hot_target(4.5, cfg.bins, 8.0)) += 0.5;
      LossBreakdown after = layer_loss(shifted, vlogit, t, cfg, w);
      CHECK(after.ce <= before.ce + 1e-12);
    }
  }

  TEST_CASE("layer_loss gradient matches finite differences") {
    ModelConfig cfg = head_cfg();
    LossWeights w;
    Rng rng(7);
    const int cells = 3;
    MatX<double> logits(cells, 2 * cfg.bins);
    MatX<double> vlogit(cells, 1);
    fill_normal<double>(logits, rng, 1.0);
    fill_normal<double>(vlogit, rng, 1.0);
    TrackTargets<double> t;
    for (int c = 0; c < cells; ++c) {
      t.x.push_back(uniform<double>(rng, 0.5, 7.5));
      t.y.push_back(uniform<double>(rng, 0.5, 7.5));
      t.vis_label.push_back(1.0);
      t.coord_mask.push_back(1);
    }
    MatX<double> dl, dv;
    layer_loss(logits, vlogit, t, cfg, w, 1.0, &dl, &dv);
    const double eps = 1e-6;
    double max_rel = 0;
    for (Index r = 0; r < logits.rows(); ++r)
      for (Index c = 0; c < logits.cols(); c += 3) {
        MatX<double> lp = logits, lm = logits;
        lp(r, c) += eps;
        lm(r, c) -= eps;
        const double fd =
            (layer_loss(lp, vlogit, t, cfg, w).total - layer_loss(lm, vlogit, t, cfg, w).total) /
            (2 * eps);
        const double rel = std::abs(fd - dl(r, c)) / std::max({std::abs(fd), std::abs(dl(r, c)),
                                                               1e-6});
        max_rel = std::max(max_rel, rel);
      }
    CHECK(max_rel < 1e-3);
    for (Index r = 0; r < vlogit.rows(); ++r) {
      MatX<double> vp = vlogit, vm = vlogit;
      vp(r, 0) += eps;
      vm(r, 0) -= eps;
      const double fd =
          (layer_loss(logits, vp, t, cfg, w).total - layer_loss(logits, vm, t, cfg, w).total) /
          (2 * eps);
      CHECK(std::abs(fd - dv(r, 0)) < 1e-6);
    }
  }

  TEST_CASE("regression head loss and gradient") {
    ModelConfig cfg = head_cfg();
    cfg.head_type = HeadKind::kRegression;
    LossWeights w;
    TrackTargets<double> t;
    t.x = {4.0};
    t.y = {2.0};
    t.vis_label = {1.0};
    t.coord_mask = {1};
    MatX<double> logits(1, 2);
    logits << 4.5, 2.0;  // err_x = 0.5 (within bw=1), err_y = 0
    MatX<double> vlogit = MatX<double>::Zero(1, 1);
    LossBreakdown lb = layer_loss(logits, vlogit, t, cfg, w);
    CHECK(lb.huber == doctest::Approx(0.5 * 0.25));
    CHECK(lb.ce == 0.0);
    MatX<double> dl, dv;
    layer_loss(logits, vlogit, t, cfg, w, 1.0, &dl, &dv);
    CHECK(dl(0, 0) == doctest::Approx(w.huber_reg * 0.5));
    CHECK(dl(0, 1) == doctest::Approx(0.0));
  }

  TEST_CASE("temperature only affects decoding, not CE") {
    ModelConfig cfg_a = head_cfg();
    ModelConfig cfg_b = head_cfg();
    cfg_b.temperature = 17.0;
    LossWeights w;
    w.use_huber = false;
    TrackTargets<double> t;
    t.x = {3.0};
    t.y = {3.0};
    t.vis_label = {1.0};
    t.coord_mask = {1};
    MatX<double> logits = MatX<double>::Random(1, 2 * cfg_a.bins);
    MatX<double> vlogit = MatX<double>::Zero(1, 1);
    CHECK(layer_loss(logits, vlogit, t, cfg_a, w).ce ==
          doctest::Approx(layer_loss(logits, vlogit, t, cfg_b, w).ce));
  }
}
