// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tapmicro/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace tapmicro {

namespace {

struct Canvas {
  int w = 0, h = 0;
  std::vector<unsigned char> rgb;

  void put(int x, int y, const unsigned char c[3]) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    const std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, const unsigned char c[3]) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      put(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void filled_box(int cx, int cy, int r, const unsigned char c[3]) {
    for (int y = cy - r; y <= cy + r; ++y)
      for (int x = cx - r; x <= cx + r; ++x) put(x, y, c);
  }

  void hollow_box(int cx, int cy, int r, const unsigned char c[3]) {
    for (int x = cx - r; x <= cx + r; ++x) {
      put(x, cy - r, c);
      put(x, cy + r, c);
    }
    for (int y = cy - r; y <= cy + r; ++y) {
      put(cx - r, y, c);
      put(cx + r, y, c);
    }
  }
};

void palette_color(int id, unsigned char out[3]) {
  static const unsigned char base[10][3] = {
      {230, 60, 60},  {60, 180, 75},  {255, 200, 0},  {0, 130, 200}, {245, 130, 48},
      {145, 30, 180}, {70, 240, 240}, {240, 50, 230}, {210, 245, 60}, {0, 128, 128}};
  out[0] = base[id % 10][0];
  out[1] = base[id % 10][1];
  out[2] = base[id % 10][2];
}

}  // namespace

std::vector<std::string> render_tracks(const VideoClip<float>& video,
                                       const std::vector<io::TrackRow>& tracks,
                                       const std::filesystem::path& out_dir,
                                       const RenderOptions& opts) {
  for (const io::TrackRow& r : tracks)
    require(r.frame >= 0 && r.frame < video.t_frames,
            "render_tracks: track frame outside the video");
  std::filesystem::create_directories(out_dir);

  // per query: frame -> row
  std::map<int, std::map<int, io::TrackRow>> by_query;
  for (const io::TrackRow& r : tracks) by_query[r.query_id][r.frame] = r;

  const int s = opts.upscale;
  std::vector<std::string> files;
  for (int t = 0; t < video.t_frames; ++t) {
    Canvas cv;
    cv.w = video.width * s;
    cv.h = video.height * s;
    cv.rgb.resize(static_cast<std::size_t>(cv.w) * cv.h * 3);
    for (int y = 0; y < cv.h; ++y)
      for (int x = 0; x < cv.w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(y) * cv.w + x) * 3;
        for (int c = 0; c < 3; ++c)
          cv.rgb[i + c] = static_cast<unsigned char>(
              std::lround(std::clamp(video.at(t, y / s, x / s, c), 0.0f, 1.0f) * 255));
      }

    for (const auto& [qid, frames] : by_query) {
      unsigned char col[3];
      palette_color(qid, col);
      // tail over past positions
      const io::TrackRow* prev = nullptr;
      for (int tt = std::max(0, t - opts.tail_frames); tt <= t; ++tt) {
        auto it = frames.find(tt);
        if (it == frames.end()) continue;
        if (prev)
          cv.line(static_cast<int>(prev->x * s), static_cast<int>(prev->y * s),
                  static_cast<int>(it->second.x * s), static_cast<int>(it->second.y * s), col);
        prev = &it->second;
      }
      auto it = frames.find(t);
      if (it != frames.end()) {
        const int cx = static_cast<int>(it->second.x * s), cy = static_cast<int>(it->second.y * s);
        if (it->second.visible)
          cv.filled_box(cx, cy, std::max(1, s / 3), col);
        else
          cv.hollow_box(cx, cy, std::max(2, s / 2), col);
      }
    }

    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05d.png", t);
    io::write_png(out_dir / name, cv.w, cv.h, cv.rgb);
    files.emplace_back(name);
  }
  return files;
}

}  // namespace tapmicro
