// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "tapmicro/eval.hpp"

using namespace tapmicro;

namespace {

EvalRecord rec(int video, double px, double py, bool pvis, double gx, double gy, bool gvis) {
  EvalRecord r;
  r.video_id = video;
  r.pred_x = px;
  r.pred_y = py;
  r.pred_visible = pvis;
  r.gt_x = gx;
  r.gt_y = gy;
  r.gt_visible = gvis;
  return r;
}

// Independent scalar-loop references used as oracles.
double oa_reference(const std::vector<EvalRecord>& rs) {
  std::map<int, std::pair<int, int>> per;
  for (const auto& r : rs) {
    per[r.video_id].first += (r.pred_visible == r.gt_visible);
    per[r.video_id].second += 1;
  }
  double s = 0;
  for (auto& [v, p] : per) s += static_cast<double>(p.first) / p.second;
  return s / per.size();
}

double delta_reference(const std::vector<EvalRecord>& rs, const std::vector<double>& taus) {
  std::map<int, std::vector<const EvalRecord*>> per;
  for (const auto& r : rs) per[r.video_id].push_back(&r);
  double s = 0;
  int used = 0;
  for (auto& [v, list] : per) {
    int vis = 0;
    std::vector<int> hit(taus.size(), 0);
    for (auto* r : list) {
      if (!r->gt_visible) continue;
      ++vis;
      const double d = std::hypot(r->pred_x - r->gt_x, r->pred_y - r->gt_y);
      for (std::size_t i = 0; i < taus.size(); ++i) hit[i] += (d <= taus[i]);
    }
    if (vis == 0) continue;
    double acc = 0;
    for (std::size_t i = 0; i < taus.size(); ++i) acc += static_cast<double>(hit[i]) / vis;
    s += acc / taus.size();
    ++used;
  }
  return s / used;
}

double aj_reference(const std::vector<EvalRecord>& rs, const std::vector<double>& taus) {
  std::map<int, std::vector<const EvalRecord*>> per;
  for (const auto& r : rs) per[r.video_id].push_back(&r);
  double s = 0;
  int vids = 0;
  for (auto& [v, list] : per) {
    double acc = 0;
    int used = 0;
    for (double tau : taus) {
      int tp = 0, fn = 0, fp = 0;
      for (auto* r : list) {
        const double d = std::hypot(r->pred_x - r->gt_x, r->pred_y - r->gt_y);
        if (r->gt_visible && r->pred_visible && d <= tau)
          ++tp;
        else if (r->gt_visible)
          ++fn;
        else if (r->pred_visible)
          ++fp;
      }
      if (tp + fn + fp == 0) continue;
      acc += static_cast<double>(tp) / (tp + fn + fp);
      ++used;
    }
    if (used == 0) continue;
    s += acc / used;
    ++vids;
  }
  return s / vids;
}

ModelConfig eval_cfg() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 32;
  cfg.heads = 2;
  cfg.lru_expansion = 1;
  cfg.patch = 4;
  cfg.bins = 8;
  cfg.softargmax_delta = 2;
  cfg.input_height = 16;
  cfg.input_width = 16;
  cfg.pos_embed_resolution = 32;
  cfg.head_hidden = 16;
  return cfg;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("occlusion accuracy counting") {
    std::vector<EvalRecord> rs{rec(0, 0, 0, true, 0, 0, true), rec(0, 0, 0, false, 0, 0, false),
                               rec(0, 0, 0, true, 0, 0, false), rec(0, 0, 0, true, 0, 0, true)};
    CHECK(occlusion_accuracy(rs) == doctest::Approx(0.75));
    std::vector<EvalRecord> inverted = rs;
    for (auto& r : inverted) r.pred_visible = !r.gt_visible;
    CHECK(occlusion_accuracy(inverted) == 0.0);
    CHECK_THROWS_AS(occlusion_accuracy({}), ConfigError);
  }

  TEST_CASE("delta_avg threshold enumeration") {
    std::vector<EvalRecord> one{rec(0, 3, 0, true, 0, 0, true)};
    CHECK(delta_avg(one) == doctest::Approx(0.6));
    std::vector<EvalRecord> two{rec(0, 1.5, 0, true, 0, 0, true),
                                rec(0, 3, 0, true, 0, 0, true)};
    CHECK(delta_avg(two) == doctest::Approx(0.7));
    std::vector<EvalRecord> zero{rec(0, 0, 0, true, 0, 0, true)};
    CHECK(delta_avg(zero) == 1.0);
  }

  TEST_CASE("average_jaccard set counting") {
    std::vector<EvalRecord> rs{rec(0, 2, 0, true, 0, 0, true),   // TP at tau=4
                               rec(0, 0, 0, false, 0, 0, true),  // FN
                               rec(0, 0, 0, true, 0, 0, false)}; // FP
    CHECK(average_jaccard(rs, {4.0}) == doctest::Approx(1.0 / 3.0));

    std::vector<EvalRecord> perfect{rec(0, 1, 1, true, 1, 1, true),
                                    rec(0, 5, 5, false, 5, 5, false)};
    CHECK(average_jaccard(perfect) == 1.0);

    std::vector<EvalRecord> all_occ{rec(0, 1, 1, false, 1, 1, true)};
    CHECK(average_jaccard(all_occ) == 0.0);
  }

  TEST_CASE("with perfect coordinates AJ equals the visibility Jaccard") {
    std::vector<EvalRecord> rs{
        rec(0, 1, 1, true, 1, 1, true),   rec(0, 2, 2, true, 2, 2, true),
        rec(0, 3, 3, false, 3, 3, true),  rec(0, 4, 4, true, 4, 4, false),
        rec(0, 5, 5, false, 5, 5, false),
    };
    // TP=2, FN=1, FP=1 at every threshold
    CHECK(average_jaccard(rs) == doctest::Approx(0.5));
  }

  TEST_CASE("metrics match the scalar-loop references on random records") {
    Rng rng(9);
    for (int it = 0; it < 100; ++it) {
      std::vector<EvalRecord> rs;
      const int videos = uniform_int(rng, 1, 4);
      for (int v = 0; v < videos; ++v) {
        const int queries = uniform_int(rng, 1, 8);
        for (int q = 0; q < queries; ++q)
          for (int t = 0; t < uniform_int(rng, 1, 16); ++t) {
            EvalRecord r;
            r.video_id = v;
            r.gt_x = uniform<double>(rng, 0, 256);
            r.gt_y = uniform<double>(rng, 0, 256);
            r.pred_x = r.gt_x + uniform<double>(rng, -20, 20);
            r.pred_y = r.gt_y + uniform<double>(rng, -20, 20);
            r.gt_visible = uniform_int(rng, 0, 3) > 0;
            r.pred_visible = uniform_int(rng, 0, 3) > 0;
            rs.push_back(r);
          }
      }
      bool any_vis = false;
      for (auto& r : rs) any_vis |= r.gt_visible;
      if (!any_vis) continue;
      CHECK(occlusion_accuracy(rs) == doctest::Approx(oa_reference(rs)).epsilon(1e-12));
      CHECK(delta_avg(rs) ==
            doctest::Approx(delta_reference(rs, default_thresholds())).epsilon(1e-12));
      CHECK(average_jaccard(rs) ==
            doctest::Approx(aj_reference(rs, default_thresholds())).epsilon(1e-12));
    }
  }

  TEST_CASE("delta_avg does not improve when noise is added") {
    Rng rng(10);
    std::vector<EvalRecord> clean;
    for (int i = 0; i < 200; ++i) {
      EvalRecord r = rec(0, 0, 0, true, 0, 0, true);
      r.gt_x = uniform<double>(rng, 0, 256);
      r.gt_y = uniform<double>(rng, 0, 256);
      r.pred_x = r.gt_x + uniform<double>(rng, -2, 2);
      r.pred_y = r.gt_y + uniform<double>(rng, -2, 2);
      clean.push_back(r);
    }
    double prev = delta_avg(clean);
    for (double noise : {2.0, 6.0, 18.0}) {
      std::vector<EvalRecord> noisy = clean;
      Rng nrng(11);
      for (auto& r : noisy) {
        r.pred_x += uniform<double>(nrng, 0.5 * noise, noise);
        r.pred_y += uniform<double>(nrng, 0.5 * noise, noise);
      }
      const double now = delta_avg(noisy);
      CHECK(now <= prev + 1e-12);
      prev = now;
    }
  }

  TEST_CASE("support grid contents") {
    QueryPoint q{2, 16.0, 16.0};
    auto only = build_support_grid(q, 0, 4.0, 0, 32, 32);
    REQUIRE(only.size() == 1);
    CHECK(only[0].x == 16.0);

    auto grid = build_support_grid(q, 0, 0.0, 2, 32, 32);
    REQUIRE(grid.size() == 5);
    CHECK(grid[1].x == doctest::Approx(8.0));
    CHECK(grid[2].x == doctest::Approx(24.0));
    CHECK(grid[1].y == doctest::Approx(8.0));
    for (const auto& p : grid) CHECK(p.t == 2);

    QueryPoint corner{0, 0.0, 0.0};
    auto local = build_support_grid(corner, 3, 4.0, 0, 32, 32);
    REQUIRE(local.size() == 10);
    for (const auto& p : local) {
      CHECK(p.x >= 0.0);
      CHECK(p.y >= 0.0);
    }
  }

  TEST_CASE("strided eval with a t=0 query matches plain streaming") {
    Model<float> m = Model<float>::build(eval_cfg());
    m.init(12);
    VideoClip<float> v = VideoClip<float>::zeros(6, 16, 16);
    Rng rng(13);
    for (auto& x : v.rgb) x = uniform<float>(rng, 0.0f, 1.0f);
    QueryPoint q{0, 5.0, 7.0};
    TrackPrediction<float> strided = strided_eval(m, v, q);
    TrackPrediction<float> plain = predict_streaming(m, v, {q});
    for (int t = 0; t < 6; ++t) {
      CHECK(strided.x[strided.cell(t, 0)] == plain.x[plain.cell(t, 0)]);
      CHECK(strided.y[strided.cell(t, 0)] == plain.y[plain.cell(t, 0)]);
      CHECK(strided.occluded[strided.cell(t, 0)] == plain.occluded[plain.cell(t, 0)]);
    }
  }

  TEST_CASE("strided eval covers every frame for mid-video queries") {
    Model<float> m = Model<float>::build(eval_cfg());
    m.init(14);
    VideoClip<float> v = VideoClip<float>::zeros(7, 16, 16);
    Rng rng(15);
    for (auto& x : v.rgb) x = uniform<float>(rng, 0.0f, 1.0f);
    for (int tq : {3, 6}) {
      QueryPoint q{tq, 8.0, 8.0};
      TrackPrediction<float> full = strided_eval(m, v, q);
      for (int t = 0; t < 7; ++t) {
        CHECK(full.has_value[full.cell(t, 0)] == 1);
        CHECK(std::isfinite(full.x[full.cell(t, 0)]));
      }
    }
  }

  TEST_CASE("strided eval of a mirrored video is the mirrored track") {
    Model<float> m = Model<float>::build(eval_cfg());
    m.init(16);
    const int t_len = 6;
    VideoClip<float> v = VideoClip<float>::zeros(t_len, 16, 16);
    Rng rng(17);
    for (auto& x : v.rgb) x = uniform<float>(rng, 0.0f, 1.0f);
    VideoClip<float> mirrored = VideoClip<float>::zeros(t_len, 16, 16);
    for (int t = 0; t < t_len; ++t)
      std::copy(v.frame_data(t), v.frame_data(t) + v.frame_values(),
                mirrored.rgb.begin() + mirrored.frame_values() * (t_len - 1 - t));
    const int tq = 2;
    QueryPoint q{tq, 6.0, 9.0};
    QueryPoint qm{t_len - 1 - tq, 6.0, 9.0};
    TrackPrediction<float> fwd = strided_eval(m, v, q);
    TrackPrediction<float> rev = strided_eval(m, mirrored, qm);
    for (int t = 0; t < t_len; ++t) {
      CHECK(fwd.x[fwd.cell(t, 0)] == rev.x[rev.cell(t_len - 1 - t, 0)]);
      CHECK(fwd.y[fwd.cell(t, 0)] == rev.y[rev.cell(t_len - 1 - t, 0)]);
    }
  }

  TEST_CASE("attention probe selectors and row-sum reassembly") {
    Model<float> m = Model<float>::build(eval_cfg());
    m.init(18);
    VideoClip<float> v = VideoClip<float>::zeros(2, 16, 16);
    Rng rng(19);
    for (auto& x : v.rgb) x = uniform<float>(rng, 0.0f, 1.0f);
    std::vector<QueryPoint> qs{{0, 4, 4}, {0, 10, 12}};

    CHECK(attention_probe(m, v, qs, {}, {}, {}).empty());

    auto entries = attention_probe(m, v, qs, {1}, {}, {0});
    REQUIRE(entries.size() == static_cast<std::size_t>(m.cfg.heads));
    const int hw = m.cfg.image_tokens();
    for (const auto& e : entries) {
      CHECK(e.layer == 1);
      CHECK(e.frame == 0);
      for (Index r = 0; r < 2; ++r)
        CHECK(e.quadrants.point_to_image.row(r).sum() + e.quadrants.point_to_point.row(r).sum() ==
              doctest::Approx(1.0f).epsilon(1e-5));
      // untrained model: point-to-image attention is near uniform
      // (entropy within 5% of ln(h*w) after renormalizing the slice)
      for (Index r = 0; r < 2; ++r) {
        VecX<float> row = e.quadrants.point_to_image.row(r).transpose();
        row /= row.sum();
        double entropy = 0;
        for (Index c = 0; c < row.size(); ++c)
          if (row(c) > 0) entropy -= row(c) * std::log(row(c));
        CHECK(entropy > 0.95 * std::log(static_cast<double>(hw)));
      }
    }
  }

  TEST_CASE("first-protocol dataset evaluation produces finite metrics") {
    Model<float> m = Model<float>::build(eval_cfg());
    m.init(20);
    Dataset<float> data;
    for (int i = 0; i < 2; ++i) {
      SceneSpec spec;
      spec.seed = 100 + i;
      spec.t_frames = 4;
      spec.height = 16;
      spec.width = 16;
      spec.points_per_sprite = 3;
      spec.bg_grid_step = 8;
      auto [clip, gt] = generate_clip<float>(spec);
      data.clips.push_back(std::move(clip));
      data.gts.push_back(std::move(gt));
    }
    DatasetEvalResult r = evaluate_first_protocol(m, data, 2, 4);
    CHECK(r.aj >= 0.0);
    CHECK(r.aj <= 1.0);
    CHECK(r.delta_avg >= 0.0);
    CHECK(r.oa >= 0.0);
    CHECK(r.delta_per_threshold.size() == 5);
  }
}
