// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tapmicro/core.hpp"

namespace tapmicro {

/// T frames of HxW RGB, values in [0,1], index ((t*H + y)*W + x)*3 + c.
template <typename S>
struct VideoClip {
  int t_frames = 0;
  int height = 0;
  int width = 0;
  std::vector<S> rgb;

  S& at(int t, int y, int x, int c) {
    return rgb[(((static_cast<std::size_t>(t) * height + y) * width + x) * 3) + c];
  }
  S at(int t, int y, int x, int c) const {
    return rgb[(((static_cast<std::size_t>(t) * height + y) * width + x) * 3) + c];
  }
  std::size_t frame_values() const { return static_cast<std::size_t>(height) * width * 3; }
  const S* frame_data(int t) const { return rgb.data() + frame_values() * t; }

  static VideoClip zeros(int t, int h, int w) {
    VideoClip v;
    v.t_frames = t;
    v.height = h;
    v.width = w;
    v.rgb.assign(static_cast<std::size_t>(t) * h * w * 3, S(0));
    return v;
  }

  void validate(int patch) const {
    require(t_frames >= 1, "video: need at least one frame");
    require(height % patch == 0 && width % patch == 0,
            "video: H and W must be divisible by the patch size");
    require(rgb.size() == static_cast<std::size_t>(t_frames) * height * width * 3,
            "video: buffer size mismatch");
    for (S v : rgb)
      if (!(v >= S(0) && v <= S(1))) throw NumericError("video: values must be finite in [0,1]");
  }
};

/// (t, x, y) anchor of a track, coordinates in native pixel units.
struct QueryPoint {
  int t = 0;
  double x = 0.0;
  double y = 0.0;
};

inline void validate_queries(const std::vector<QueryPoint>& qs, int t_frames, int h, int w) {
  for (const QueryPoint& q : qs) {
    require(q.t >= 0 && q.t < t_frames, "query: frame index out of range");
    require(q.x >= 0.0 && q.x <= w && q.y >= 0.0 && q.y <= h,
            "query: coordinates outside frame bounds");
    require(std::isfinite(q.x) && std::isfinite(q.y), "query: non-finite coordinates");
  }
}

enum class TemporalBlockKind { kSsm, kAttention };
enum class HeadKind { kClassification, kRegression };

/// Backbone + head configuration. `toy()` is the desk-scale preset used by
/// tests and the acceptance suite; `paper_s()` mirrors the published S model.
struct ModelConfig {
  int layers = 4;
  int width = 128;        // C
  int heads = 4;          // attention heads
  int lru_expansion = 1;  // lru_width = width * expansion
  int patch = 4;
  int bins = 32;                  // n, coordinate classifier bins per axis
  int softargmax_delta = 3;       // truncation window in bins
  double temperature = 2.0;       // decoding softmax temperature
  int pos_embed_resolution = 64;  // sincos2d grid resolution
  int input_height = 32;
  int input_width = 32;
  TemporalBlockKind temporal_block = TemporalBlockKind::kSsm;
  HeadKind head_type = HeadKind::kClassification;
  int head_hidden = 256;
  double decay_c = 8.0;  // RG-LRU decay constant
  bool forget_gate_clamp_enabled = false;
  double forget_gate_clamp_lo = 0.0;
  double forget_gate_clamp_hi = 0.1;
  bool query_broadcast = false;  // experimental long-video mitigation
  double occlusion_radius_base = 8.0;  // pixels at 256-pixel extent

  int grid_h() const { return input_height / patch; }
  int grid_w() const { return input_width / patch; }
  int image_tokens() const { return grid_h() * grid_w(); }
  int lru_width() const { return width * lru_expansion; }
  double occlusion_radius(double extent) const { return occlusion_radius_base * extent / 256.0; }

  void validate() const {
    require(layers > 0 && width > 0 && heads > 0 && patch > 0, "config: sizes must be positive");
    require(width % heads == 0, "config: width must be divisible by heads");
    require(width % 4 == 0, "config: width must be divisible by 4 for sincos2d");
    require(lru_expansion == 1 || lru_expansion == 2, "config: lru_expansion must be 1 or 2");
    require(bins >= 2, "config: need at least two coordinate bins");
    require(softargmax_delta >= 0, "config: softargmax delta must be non-negative");
    require(temperature > 0, "config: temperature must be positive");
    require(pos_embed_resolution > 0, "config: positional resolution must be positive");
    require(input_height % patch == 0 && input_width % patch == 0,
            "config: input dims must be divisible by the patch size");
    if (forget_gate_clamp_enabled)
      require(forget_gate_clamp_lo >= 0 && forget_gate_clamp_lo < forget_gate_clamp_hi &&
                  forget_gate_clamp_hi <= 1,
              "config: forget gate clamp range must satisfy 0 <= lo < hi <= 1");
  }

  static ModelConfig toy() { return ModelConfig{}; }

  static ModelConfig paper_s() {
    ModelConfig c;
    c.layers = 12;
    c.width = 384;
    c.heads = 12;
    c.lru_expansion = 2;
    c.patch = 8;
    c.bins = 256;
    c.softargmax_delta = 20;
    c.temperature = 2.0;
    c.pos_embed_resolution = 256;
    c.input_height = 256;
    c.input_width = 256;
    return c;
  }
};

}  // namespace tapmicro
