// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Procedural moving-sprite clips: textured discs and rectangles on closed-form
// trajectories over a panning textured background, rendered with motion blur
// (averaged sub-frame taps). Track coordinates and visibility come from the
// sprite parameters analytically, never from pixels.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "tapmicro/types.hpp"

namespace tapmicro {

struct SceneSpec {
  std::uint64_t seed = 0;
  int t_frames = 16;
  int height = 32;
  int width = 32;
  int min_sprites = 2;
  int max_sprites = 4;
  double max_speed = 1.5;  // sprite velocity, px/frame
  double max_pan = 1.0;    // camera pan velocity, px/frame
  int blur_taps = 4;
  double blur_shutter = 0.5;  // fraction of the frame interval integrated
  int bg_grid_step = 8;       // background track-point lattice spacing
  int points_per_sprite = 6;
  bool sinusoidal = true;

  void validate() const {
    require(t_frames >= 1 && height > 0 && width > 0, "scene: bad dimensions");
    require(min_sprites >= 0 && max_sprites >= min_sprites, "scene: bad sprite count range");
    require(blur_taps >= 1, "scene: need at least one blur tap");
  }
};

struct Sprite {
  enum Kind { kDisc, kRect } kind = kDisc;
  double cx0 = 0, cy0 = 0;  // center at t = 0 (screen coords)
  double vx = 0, vy = 0;    // px/frame
  double rx = 4, ry = 4;    // radius (disc uses rx) or half extents
  double ax = 0, ay = 0, omega = 0, phase_x = 0, phase_y = 0;
  int z = 0;  // larger z is drawn on top
  int tex_kind = 0;  // 0 checker, 1 value noise
  double tex_scale = 2.0;
  double tex_ox = 0, tex_oy = 0;
  double col_a[3] = {1, 1, 1};
  double col_b[3] = {0, 0, 0};
  std::uint64_t tex_seed = 0;

  double px(double t) const { return cx0 + vx * t + ax * std::sin(omega * t + phase_x); }
  double py(double t) const { return cy0 + vy * t + ay * std::sin(omega * t + phase_y); }

  bool contains(double x, double y, double t) const {
    const double dx = x - px(t), dy = y - py(t);
    if (kind == kDisc) return dx * dx + dy * dy <= rx * rx;
    return std::abs(dx) <= rx && std::abs(dy) <= ry;
  }
};

/// Fully parametric scene; position of everything is closed-form in t.
struct Scene {
  int t_frames = 0, height = 0, width = 0;
  double pan_x = 0, pan_y = 0;  // camera pan: world content moves by -pan per frame
  std::vector<Sprite> sprites;  // kept sorted by z ascending
  double bg_scale = 6.0;
  double bg_col_a[3] = {0.3, 0.3, 0.3};
  double bg_col_b[3] = {0.7, 0.7, 0.7};
  std::uint64_t bg_seed = 1;
};

/// A tracked surface point: offset on a sprite, or a world-fixed background
/// point that moves with the pan.
struct TrackPointDef {
  int sprite = -1;  // -1: background
  double ox = 0, oy = 0;
};

struct GroundTruth {
  int t_frames = 0;
  int n_points = 0;
  std::vector<double> x, y;    // [T*P]
  std::vector<char> visible;   // [T*P]
  std::size_t cell(int t, int p) const { return static_cast<std::size_t>(t) * n_points + p; }
};

namespace detail {

inline double hash01(std::uint64_t seed, std::int64_t xi, std::int64_t yi) {
  std::uint64_t h = seed ^ (static_cast<std::uint64_t>(xi) * 0x9e3779b97f4a7c15ull) ^
                    (static_cast<std::uint64_t>(yi) * 0xc2b2ae3d27d4eb4full);
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  h *= 0xc4ceb9fe1a85ec53ull;
  h ^= h >> 33;
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

/// Smooth value noise in [0,1] on a unit lattice.
inline double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto xi = static_cast<std::int64_t>(fx), yi = static_cast<std::int64_t>(fy);
  const double tx = x - fx, ty = y - fy;
  const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
  const double v00 = hash01(seed, xi, yi), v10 = hash01(seed, xi + 1, yi);
  const double v01 = hash01(seed, xi, yi + 1), v11 = hash01(seed, xi + 1, yi + 1);
  return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy;
}

inline void sprite_color(const Sprite& s, double lx, double ly, double out[3]) {
  if (s.tex_kind == 0) {
    const auto cx = static_cast<std::int64_t>(std::floor(lx / s.tex_scale + s.tex_ox));
    const auto cy = static_cast<std::int64_t>(std::floor(ly / s.tex_scale + s.tex_oy));
    const double* c = ((cx + cy) & 1) ? s.col_b : s.col_a;
    out[0] = c[0];
    out[1] = c[1];
    out[2] = c[2];
  } else {
    const double v = value_noise(s.tex_seed, lx / s.tex_scale + s.tex_ox,
                                 ly / s.tex_scale + s.tex_oy);
    for (int c = 0; c < 3; ++c) out[c] = s.col_a[c] * (1 - v) + s.col_b[c] * v;
  }
}

inline void background_color(const Scene& sc, double wx, double wy, double out[3]) {
  const double v = value_noise(sc.bg_seed, wx / sc.bg_scale, wy / sc.bg_scale);
  for (int c = 0; c < 3; ++c) out[c] = sc.bg_col_a[c] * (1 - v) + sc.bg_col_b[c] * v;
}

inline void shade(const Scene& sc, double x, double y, double t, double out[3]) {
  for (auto it = sc.sprites.rbegin(); it != sc.sprites.rend(); ++it) {
    if (it->contains(x, y, t)) {
      sprite_color(*it, x - it->px(t), y - it->py(t), out);
      return;
    }
  }
  background_color(sc, x + sc.pan_x * t, y + sc.pan_y * t, out);
}

}  // namespace detail

/// Screen position of a track point at (real) time t.
inline void track_point_pos(const Scene& sc, const TrackPointDef& p, double t, double* x,
                            double* y) {
  if (p.sprite < 0) {
    *x = p.ox - sc.pan_x * t;
    *y = p.oy - sc.pan_y * t;
  } else {
    const Sprite& s = sc.sprites[p.sprite];
    *x = s.px(t) + p.ox;
    *y = s.py(t) + p.oy;
  }
}

/// Visibility: inside the frame and not covered by any sprite with larger z
/// (any sprite at all for background points).
inline bool track_point_visible(const Scene& sc, const TrackPointDef& p, double t) {
  double x, y;
  track_point_pos(sc, p, t, &x, &y);
  if (x < 0 || x >= sc.width || y < 0 || y >= sc.height) return false;
  const int z = p.sprite < 0 ? -1 : sc.sprites[p.sprite].z;
  for (const Sprite& s : sc.sprites)
    if (s.z > z && s.contains(x, y, t)) return false;
  return true;
}

template <typename S>
VideoClip<S> render_scene(const Scene& sc, int blur_taps, double shutter) {
  VideoClip<S> clip = VideoClip<S>::zeros(sc.t_frames, sc.height, sc.width);
  double rgb[3];
  for (int t = 0; t < sc.t_frames; ++t) {
    for (int yy = 0; yy < sc.height; ++yy) {
      for (int xx = 0; xx < sc.width; ++xx) {
        double acc[3] = {0, 0, 0};
        for (int k = 0; k < blur_taps; ++k) {
          const double tau = t + shutter * ((k + 0.5) / blur_taps - 0.5);
          detail::shade(sc, xx + 0.5, yy + 0.5, tau, rgb);
          for (int c = 0; c < 3; ++c) acc[c] += rgb[c];
        }
        for (int c = 0; c < 3; ++c)
          clip.at(t, yy, xx, c) = static_cast<S>(std::clamp(acc[c] / blur_taps, 0.0, 1.0));
      }
    }
  }
  return clip;
}

inline GroundTruth scene_ground_truth(const Scene& sc, const std::vector<TrackPointDef>& points) {
  GroundTruth gt;
  gt.t_frames = sc.t_frames;
  gt.n_points = static_cast<int>(points.size());
  gt.x.resize(static_cast<std::size_t>(sc.t_frames) * points.size());
  gt.y.resize(gt.x.size());
  gt.visible.resize(gt.x.size());
  for (int t = 0; t < sc.t_frames; ++t)
    for (std::size_t p = 0; p < points.size(); ++p) {
      double x, y;
      track_point_pos(sc, points[p], t, &x, &y);
      const std::size_t c = gt.cell(t, static_cast<int>(p));
      gt.x[c] = x;
      gt.y[c] = y;
      gt.visible[c] = track_point_visible(sc, points[p], t) ? 1 : 0;
    }
  return gt;
}

/// Deterministic scene construction from the spec seed.
inline Scene build_scene(const SceneSpec& spec, std::vector<TrackPointDef>* points) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 0xdada));
  Scene sc;
  sc.t_frames = spec.t_frames;
  sc.height = spec.height;
  sc.width = spec.width;
  sc.pan_x = uniform<double>(rng, -spec.max_pan, spec.max_pan);
  sc.pan_y = uniform<double>(rng, -spec.max_pan, spec.max_pan);
  sc.bg_seed = mix_seed(spec.seed, 0xb6);
  sc.bg_scale = uniform<double>(rng, 4.0, 9.0);
  for (int c = 0; c < 3; ++c) {
    sc.bg_col_a[c] = uniform<double>(rng, 0.05, 0.5);
    sc.bg_col_b[c] = uniform<double>(rng, 0.5, 0.95);
  }

  const int n_sprites = uniform_int(rng, spec.min_sprites, spec.max_sprites);
  const double min_dim = std::min(spec.height, spec.width);
  for (int i = 0; i < n_sprites; ++i) {
    Sprite s;
    s.kind = uniform_int(rng, 0, 1) == 0 ? Sprite::kDisc : Sprite::kRect;
    s.cx0 = uniform<double>(rng, 0.15 * spec.width, 0.85 * spec.width);
    s.cy0 = uniform<double>(rng, 0.15 * spec.height, 0.85 * spec.height);
    s.vx = uniform<double>(rng, -spec.max_speed, spec.max_speed);
    s.vy = uniform<double>(rng, -spec.max_speed, spec.max_speed);
    s.rx = uniform<double>(rng, 0.1 * min_dim, 0.28 * min_dim);
    s.ry = s.kind == Sprite::kRect ? uniform<double>(rng, 0.1 * min_dim, 0.28 * min_dim) : s.rx;
    if (spec.sinusoidal && uniform<double>(rng, 0.0, 1.0) < 0.5) {
      s.ax = uniform<double>(rng, 0.0, 1.5);
      s.ay = uniform<double>(rng, 0.0, 1.5);
      s.omega = uniform<double>(rng, 0.2, 0.8);
      s.phase_x = uniform<double>(rng, 0.0, 2 * M_PI);
      s.phase_y = uniform<double>(rng, 0.0, 2 * M_PI);
    }
    s.z = i + 1;
    s.tex_kind = uniform_int(rng, 0, 1);
    s.tex_scale = uniform<double>(rng, 1.5, 4.0);
    s.tex_ox = uniform<double>(rng, 0.0, 4.0);
    s.tex_oy = uniform<double>(rng, 0.0, 4.0);
    for (int c = 0; c < 3; ++c) {
      s.col_a[c] = uniform<double>(rng, 0.0, 1.0);
      s.col_b[c] = uniform<double>(rng, 0.0, 1.0);
    }
    // guarantee texture contrast
    if (std::abs(s.col_a[0] - s.col_b[0]) + std::abs(s.col_a[1] - s.col_b[1]) +
            std::abs(s.col_a[2] - s.col_b[2]) < 0.6) {
      for (int c = 0; c < 3; ++c) s.col_b[c] = s.col_a[c] > 0.5 ? s.col_a[c] - 0.5 : s.col_a[c] + 0.5;
    }
    s.tex_seed = mix_seed(spec.seed, 0x100 + i);
    sc.sprites.push_back(s);
  }

  if (points) {
    points->clear();
    if (!sc.sprites.empty()) {
      for (std::size_t i = 0; i < sc.sprites.size(); ++i) {
        const Sprite& s = sc.sprites[i];
        for (int k = 0; k < spec.points_per_sprite; ++k) {
          TrackPointDef p;
          p.sprite = static_cast<int>(i);
          if (s.kind == Sprite::kDisc) {
            const double r = s.rx * 0.85 * std::sqrt(uniform<double>(rng, 0.0, 1.0));
            const double a = uniform<double>(rng, 0.0, 2 * M_PI);
            p.ox = r * std::cos(a);
            p.oy = r * std::sin(a);
          } else {
            p.ox = uniform<double>(rng, -0.85 * s.rx, 0.85 * s.rx);
            p.oy = uniform<double>(rng, -0.85 * s.ry, 0.85 * s.ry);
          }
          points->push_back(p);
        }
      }
      for (int gy = spec.bg_grid_step / 2; gy < spec.height; gy += spec.bg_grid_step)
        for (int gx = spec.bg_grid_step / 2; gx < spec.width; gx += spec.bg_grid_step)
          points->push_back(TrackPointDef{-1, gx + 0.5, gy + 0.5});
    }
  }
  return sc;
}

/// Deterministic clip + exact ground truth for a spec.
template <typename S>
std::pair<VideoClip<S>, GroundTruth> generate_clip(const SceneSpec& spec) {
  std::vector<TrackPointDef> points;
  Scene sc = build_scene(spec, &points);
  VideoClip<S> clip = render_scene<S>(sc, spec.blur_taps, spec.blur_shutter);
  GroundTruth gt = scene_ground_truth(sc, points);
  return {std::move(clip), std::move(gt)};
}

// ---------------------------------------------------------------------------
// query sampling
// ---------------------------------------------------------------------------

struct QueryBatch {
  std::vector<QueryPoint> queries;
  std::vector<int> point_index;       // ground-truth point backing each query
  std::vector<char> coord_loss_mask;  // [T*Q], row t*Q + j
  std::vector<double> vis_target;     // [T*Q], 0 before the query frame
};

/// Draws Q queries at frames where the backing point is visible; a t0_prob
/// fraction is anchored at frame 0.
inline QueryBatch sample_queries(const GroundTruth& gt, int n_queries, double t0_prob,
                                 std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5eed));
  std::vector<int> vis0;
  std::vector<std::pair<int, int>> vis_any;  // (t, p)
  for (int p = 0; p < gt.n_points; ++p) {
    if (gt.n_points > 0 && gt.visible[gt.cell(0, p)]) vis0.push_back(p);
    for (int t = 0; t < gt.t_frames; ++t)
      if (gt.visible[gt.cell(t, p)]) vis_any.emplace_back(t, p);
  }
  if (vis_any.empty()) throw ConfigError("sample_queries: no visible points in the clip");

  QueryBatch out;
  for (int j = 0; j < n_queries; ++j) {
    int t, p;
    const bool want_t0 = uniform<double>(rng, 0.0, 1.0) < t0_prob && !vis0.empty();
    if (want_t0) {
      t = 0;
      p = vis0[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(vis0.size()) - 1))];
    } else {
      const auto& tp =
          vis_any[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(vis_any.size()) - 1))];
      t = tp.first;
      p = tp.second;
    }
    QueryPoint q;
    q.t = t;
    q.x = gt.x[gt.cell(t, p)];
    q.y = gt.y[gt.cell(t, p)];
    out.queries.push_back(q);
    out.point_index.push_back(p);
  }
  const int t_len = gt.t_frames;
  out.coord_loss_mask.assign(static_cast<std::size_t>(t_len) * n_queries, 0);
  out.vis_target.assign(static_cast<std::size_t>(t_len) * n_queries, 0.0);
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < n_queries; ++j) {
      const std::size_t cell = static_cast<std::size_t>(t) * n_queries + j;
      if (t >= out.queries[j].t) {
        out.coord_loss_mask[cell] = 1;
        out.vis_target[cell] = gt.visible[gt.cell(t, out.point_index[j])] ? 1.0 : 0.0;
      }
    }
  return out;
}

}  // namespace tapmicro
