// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Video + query points -> joint token grid.
// Grid layout per frame: h*w image tokens in row-major patch order, then Q
// point-track tokens. A track token holds the sincos embedding of the query
// coordinates at its query frame and the shared learned mask token elsewhere.
#pragma once

#include <cmath>
#include <vector>

#include "tapmicro/nn.hpp"
#include "tapmicro/param_store.hpp"
#include "tapmicro/types.hpp"

namespace tapmicro {

template <typename S>
struct CodecParams {
  ParamId patch_proj;  // [3p^2, C], no bias: the positional table absorbs it
  ParamId pos_embed;   // [h*w, C] learned
  ParamId mask_token;  // [1, C] shared across all masked positions

  static CodecParams build(ParamStore<S>& store, const ModelConfig& cfg) {
    CodecParams p;
    const int pdim = 3 * cfg.patch * cfg.patch;
    p.patch_proj = store.add("codec.patch_proj.w", pdim, cfg.width);
    p.pos_embed = store.add("codec.pos_embed", cfg.image_tokens(), cfg.width, /*decay=*/false);
    p.mask_token = store.add("codec.mask_token", 1, cfg.width, /*decay=*/false);
    return p;
  }

  void init(ParamStore<S>& store, Rng& rng) const {
    fill_normal<S>(store.value(patch_proj), rng, 0.02);
    fill_normal<S>(store.value(pos_embed), rng, 0.02);
    fill_normal<S>(store.value(mask_token), rng, 0.02);
  }
};

/// [T, H, W, 3] -> [T*h*w, 3p^2]; patch (r, c) of frame t occupies row
/// t*h*w + r*w + c, flattened row-major over (pixel row, pixel col, channel).
template <typename S>
MatX<S> patchify(const VideoClip<S>& video, int p) {
  require(video.height % p == 0 && video.width % p == 0,
          "patchify: H and W must be divisible by the patch size");
  const int T = video.t_frames, h = video.height / p, w = video.width / p;
  MatX<S> out(static_cast<Index>(T) * h * w, 3 * p * p);
  for (int t = 0; t < T; ++t)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const Index row = static_cast<Index>(t) * h * w + r * w + c;
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int ch = 0; ch < 3; ++ch)
              out(row, (py * p + px) * 3 + ch) = video.at(t, r * p + py, c * p + px, ch);
      }
  return out;
}

/// Exact inverse of patchify.
template <typename S>
VideoClip<S> unpatchify(const MatX<S>& patches, int t_frames, int height, int width, int p) {
  const int h = height / p, w = width / p;
  require_shape(patches.rows() == static_cast<Index>(t_frames) * h * w &&
                    patches.cols() == 3 * p * p,
                "unpatchify: shape mismatch");
  VideoClip<S> video = VideoClip<S>::zeros(t_frames, height, width);
  for (int t = 0; t < t_frames; ++t)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const Index row = static_cast<Index>(t) * h * w + r * w + c;
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int ch = 0; ch < 3; ++ch)
              video.at(t, r * p + py, c * p + px, ch) = patches(row, (py * p + px) * 3 + ch);
      }
  return video;
}

/// Interleaved sine/cosine positional code evaluated analytically at the
/// continuous (x, y); geometric frequency ladder spanning [1, 1/res] rad/px.
/// First C/2 channels encode x, last C/2 encode y.
template <typename S>
VecX<S> sincos2d(double x, double y, int channels, int res) {
  require(channels % 4 == 0, "sincos2d: channels must be divisible by 4");
  const int pairs = channels / 4;
  VecX<S> out(channels);
  for (int k = 0; k < pairs; ++k) {
    const double omega =
        pairs > 1 ? std::pow(static_cast<double>(res), -static_cast<double>(k) / (pairs - 1))
                  : 1.0;
    out(2 * k) = static_cast<S>(std::sin(x * omega));
    out(2 * k + 1) = static_cast<S>(std::cos(x * omega));
    out(channels / 2 + 2 * k) = static_cast<S>(std::sin(y * omega));
    out(channels / 2 + 2 * k + 1) = static_cast<S>(std::cos(y * omega));
  }
  return out;
}

/// Query coordinates are rescaled from native pixels to the embedding
/// resolution before encoding.
template <typename S>
VecX<S> query_embedding(const QueryPoint& q, const ModelConfig& cfg) {
  const double sx = static_cast<double>(cfg.pos_embed_resolution) / cfg.input_width;
  const double sy = static_cast<double>(cfg.pos_embed_resolution) / cfg.input_height;
  return sincos2d<S>(q.x * sx, q.y * sy, cfg.width, cfg.pos_embed_resolution);
}

/// [T*Q, C] point-track tokens: row t*Q + j is the sincos embedding when
/// t == t_j, the shared mask token otherwise. No temporal embedding is added.
template <typename S>
MatX<S> encode_queries(const std::vector<QueryPoint>& queries, const ParamStore<S>& store,
                       const CodecParams<S>& params, const ModelConfig& cfg, int t_frames) {
  validate_queries(queries, t_frames, cfg.input_height, cfg.input_width);
  const Index q = static_cast<Index>(queries.size());
  MatX<S> out(static_cast<Index>(t_frames) * q, cfg.width);
  if (q == 0) return out;
  const auto mask = store.value(params.mask_token);
  for (int t = 0; t < t_frames; ++t)
    for (Index j = 0; j < q; ++j) out.row(t * q + j) = mask.row(0);
  for (Index j = 0; j < q; ++j) {
    VecX<S> emb = query_embedding<S>(queries[j], cfg);
    if (cfg.query_broadcast) {
      // experimental long-video mode: repeat the query embedding from its
      // frame onward instead of mask tokens
      for (int t = queries[j].t; t < t_frames; ++t)
        out.row(static_cast<Index>(t) * q + j) = emb.transpose();
    } else {
      out.row(static_cast<Index>(queries[j].t) * q + j) = emb.transpose();
    }
  }
  return out;
}

/// Patch embedding: patches * W + positional table broadcast over T.
template <typename S>
MatX<S> embed_patches(const MatX<S>& patches, const ParamStore<S>& store,
                      const CodecParams<S>& params, const ModelConfig&) {
  const auto w = store.value(params.patch_proj);
  const auto pos = store.value(params.pos_embed);
  require_shape(patches.cols() == w.rows(), "embed_patches: patch dim mismatch");
  const Index hw = pos.rows();
  require_shape(patches.rows() % hw == 0, "embed_patches: rows not a multiple of h*w");
  MatX<S> out = patches * w;
  for (Index t = 0; t < patches.rows() / hw; ++t) out.middleRows(t * hw, hw) += pos;
  return out;
}

/// Concatenate image and point tokens along the per-frame token axis:
/// frame t occupies rows [t*(hw+Q), (t+1)*(hw+Q)), image tokens first.
template <typename S>
MatX<S> assemble_tokens(const MatX<S>& image_tokens, const MatX<S>& point_tokens, int hw, int q) {
  require_shape(image_tokens.cols() == point_tokens.cols() || q == 0,
                "assemble_tokens: width mismatch");
  require_shape(hw > 0 && image_tokens.rows() % hw == 0, "assemble_tokens: bad image rows");
  const Index t_frames = image_tokens.rows() / hw;
  require_shape(q == 0 || point_tokens.rows() == t_frames * q,
                "assemble_tokens: frame count mismatch");
  const Index n = hw + q;
  MatX<S> out(t_frames * n, image_tokens.cols());
  for (Index t = 0; t < t_frames; ++t) {
    out.middleRows(t * n, hw) = image_tokens.middleRows(t * hw, hw);
    if (q > 0) out.middleRows(t * n + hw, q) = point_tokens.middleRows(t * q, q);
  }
  return out;
}

/// Inverse of assemble_tokens (pure slicing).
template <typename S>
std::pair<MatX<S>, MatX<S>> split_tokens(const MatX<S>& grid, int hw, int q) {
  const Index n = hw + q;
  require_shape(grid.rows() % n == 0, "split_tokens: bad row count");
  const Index t_frames = grid.rows() / n;
  MatX<S> image(t_frames * hw, grid.cols());
  MatX<S> point(t_frames * q, grid.cols());
  for (Index t = 0; t < t_frames; ++t) {
    image.middleRows(t * hw, hw) = grid.middleRows(t * n, hw);
    if (q > 0) point.middleRows(t * q, q) = grid.middleRows(t * n + hw, q);
  }
  return {std::move(image), std::move(point)};
}

/// Backward through embed_patches + encode_queries + assemble_tokens.
/// `dgrid` is the gradient w.r.t. the assembled [T*N, C] grid.
template <typename S>
void codec_backward(const MatX<S>& dgrid, const MatX<S>& patches,
                    const std::vector<QueryPoint>& queries, ParamStore<S>& store,
                    const CodecParams<S>& params, const ModelConfig& cfg) {
  const int hw = cfg.image_tokens();
  const Index q = static_cast<Index>(queries.size());
  const Index n = hw + q;
  const Index t_frames = dgrid.rows() / n;
  auto dproj = store.grad(params.patch_proj);
  auto dpos = store.grad(params.pos_embed);
  auto dmask = store.grad(params.mask_token);
  MatX<S> dimg(t_frames * hw, cfg.width);
  for (Index t = 0; t < t_frames; ++t) {
    auto block = dgrid.middleRows(t * n, hw);
    dimg.middleRows(t * hw, hw) = block;
    dpos += block;
    for (Index j = 0; j < q; ++j) {
      const bool injected = cfg.query_broadcast ? (t >= queries[j].t) : (t == queries[j].t);
      if (!injected) dmask.row(0) += dgrid.row(t * n + hw + j);
    }
  }
  dproj.noalias() += patches.transpose() * dimg;
}

}  // namespace tapmicro
