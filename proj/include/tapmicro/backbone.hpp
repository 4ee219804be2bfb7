// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// L interleaved (recurrent, spatial) layers over the token grid. Offline
// mode scans whole clips; streaming mode advances one frame at a time with
// O(1) state and matches the offline path to float tolerance. Track-token
// outputs are tapped after every spatial block for the per-layer losses.
#pragma once

#include <array>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tapmicro/heads.hpp"
#include "tapmicro/recurrent.hpp"
#include "tapmicro/spatial.hpp"
#include "tapmicro/token_codec.hpp"

namespace tapmicro {

template <typename S>
struct Model {
  ModelConfig cfg;
  ParamStore<S> store;
  CodecParams<S> codec;
  std::vector<RecurrentBlockParams<S>> rec;
  std::vector<TemporalAttentionParams<S>> tattn;
  std::vector<SpatialBlockParams<S>> spatial;
  HeadParams<S> heads;

  static Model build(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.codec = CodecParams<S>::build(m.store, cfg);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string prefix = "layer" + std::to_string(l);
      if (cfg.temporal_block == TemporalBlockKind::kSsm)
        m.rec.push_back(RecurrentBlockParams<S>::build(m.store, prefix + ".rec", cfg));
      else
        m.tattn.push_back(TemporalAttentionParams<S>::build(m.store, prefix + ".tattn", cfg));
      m.spatial.push_back(SpatialBlockParams<S>::build(m.store, prefix + ".sp", cfg));
    }
    m.heads = HeadParams<S>::build(m.store, cfg);
    return m;
  }

  void init(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x1217));
    codec.init(store, rng);
    for (auto& r : rec) r.init(store, rng, cfg);
    for (auto& t : tattn) t.init(store, rng, cfg);
    for (auto& s : spatial) s.init(store, rng, cfg);
    heads.init(store, rng, cfg);
  }
};

/// Per-frame, per-query decoded predictions. Cells are indexed t*Q + j;
/// `has_value` is false for streaming cells before the query was injected.
template <typename S>
struct TrackPrediction {
  int t_frames = 0;
  int n_queries = 0;
  std::vector<S> x, y;
  std::vector<S> visible_prob;
  std::vector<S> mass_in;
  std::vector<char> occluded;
  std::vector<char> has_value;

  void resize(int t, int q) {
    t_frames = t;
    n_queries = q;
    const std::size_t n = static_cast<std::size_t>(t) * q;
    x.assign(n, S(0));
    y.assign(n, S(0));
    visible_prob.assign(n, S(0));
    mass_in.assign(n, S(0));
    occluded.assign(n, 1);
    has_value.assign(n, 0);
  }
  std::size_t cell(int t, int j) const { return static_cast<std::size_t>(t) * n_queries + j; }
};

template <typename S>
struct BackboneOutput {
  std::vector<MatX<S>> per_layer_track_tokens;  // L entries of [T*Q, C]
  MatX<S> final_tokens;                         // [T*N, C]
};

template <typename S>
struct OfflineCaches {
  MatX<S> patches;
  std::vector<RecurrentCache<S>> rec;
  std::vector<TemporalAttentionCache<S>> tattn;
  std::vector<SpatialCache<S>> spatial;
};

/// Attention maps captured during an offline forward; index order is
/// (layer, frame, head) as pushed.
template <typename S>
struct AttentionCapture {
  std::set<int> layers;               // which layers to record
  std::vector<MatX<S>> maps;          // [N, N] each
  std::vector<std::array<int, 3>> id;  // (layer, frame, head)
};

namespace detail {

template <typename S>
MatX<S> extract_track_rows(const MatX<S>& grid, Index t_len, Index hw, Index q) {
  MatX<S> out(t_len * q, grid.cols());
  const Index n = hw + q;
  for (Index t = 0; t < t_len; ++t)
    if (q > 0) out.middleRows(t * q, q) = grid.middleRows(t * n + hw, q);
  return out;
}

template <typename S>
void scatter_track_rows(MatX<S>& grid, const MatX<S>& rows, Index t_len, Index hw, Index q) {
  const Index n = hw + q;
  for (Index t = 0; t < t_len; ++t)
    if (q > 0) grid.middleRows(t * n + hw, q) += rows.middleRows(t * q, q);
}

}  // namespace detail

/// Offline forward: codec -> [temporal; spatial] x L, capturing per-layer
/// track tokens. Deterministic given parameters and inputs.
template <typename S>
BackboneOutput<S> forward_offline(const Model<S>& m, const VideoClip<S>& video,
                                  const std::vector<QueryPoint>& queries,
                                  OfflineCaches<S>* caches = nullptr,
                                  AttentionCapture<S>* capture = nullptr) {
  const ModelConfig& cfg = m.cfg;
  require(video.height == cfg.input_height && video.width == cfg.input_width,
          "forward_offline: video size does not match the model config");
  video.validate(cfg.patch);
  validate_queries(queries, video.t_frames, video.height, video.width);

  const Index t_len = video.t_frames;
  const Index hw = cfg.image_tokens();
  const Index q = static_cast<Index>(queries.size());
  const Index n = hw + q;

  MatX<S> patches = patchify(video, cfg.patch);
  MatX<S> image_tokens = embed_patches(patches, m.store, m.codec, cfg);
  MatX<S> point_tokens = encode_queries(queries, m.store, m.codec, cfg, video.t_frames);
  MatX<S> grid = assemble_tokens(image_tokens, point_tokens, static_cast<int>(hw),
                                 static_cast<int>(q));

  if (caches) {
    caches->patches = std::move(patches);
    caches->rec.resize(cfg.temporal_block == TemporalBlockKind::kSsm ? cfg.layers : 0);
    caches->tattn.resize(cfg.temporal_block == TemporalBlockKind::kAttention ? cfg.layers : 0);
    caches->spatial.resize(cfg.layers);
  }

  BackboneOutput<S> out;
  out.per_layer_track_tokens.reserve(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    if (cfg.temporal_block == TemporalBlockKind::kSsm)
      grid = recurrent_block_forward(grid, m.store, m.rec[l], cfg, n,
                                     caches ? &caches->rec[l] : nullptr);
    else
      grid = temporal_attention_forward(grid, m.store, m.tattn[l], cfg, n,
                                        caches ? &caches->tattn[l] : nullptr);
    const bool cap = capture && capture->layers.count(l) > 0;
    std::vector<MatX<S>> maps;
    grid = spatial_block_forward(grid, m.store, m.spatial[l], cfg, n, cap, cap ? &maps : nullptr,
                                 caches ? &caches->spatial[l] : nullptr);
    if (cap) {
      for (Index t = 0; t < t_len; ++t)
        for (int h = 0; h < cfg.heads; ++h) {
          capture->maps.push_back(std::move(maps[static_cast<std::size_t>(t) * cfg.heads + h]));
          capture->id.push_back({l, static_cast<int>(t), h});
        }
    }
    out.per_layer_track_tokens.push_back(detail::extract_track_rows(grid, t_len, hw, q));
  }
  out.final_tokens = std::move(grid);
  return out;
}

/// Backward through the offline forward given per-layer track-token
/// gradients; accumulates parameter gradients in the store.
template <typename S>
void backward_offline(Model<S>& m, const OfflineCaches<S>& caches,
                      const std::vector<MatX<S>>& dtrack,
                      const std::vector<QueryPoint>& queries, int t_frames) {
  const ModelConfig& cfg = m.cfg;
  const Index hw = cfg.image_tokens();
  const Index q = static_cast<Index>(queries.size());
  const Index n = hw + q;
  MatX<S> g = MatX<S>::Zero(static_cast<Index>(t_frames) * n, cfg.width);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    if (dtrack[l].size() > 0)
      detail::scatter_track_rows(g, dtrack[l], t_frames, hw, q);
    g = spatial_block_backward(g, caches.spatial[l], m.store, m.spatial[l], cfg, n);
    if (cfg.temporal_block == TemporalBlockKind::kSsm)
      g = recurrent_block_backward(g, caches.rec[l], m.store, m.rec[l], cfg);
    else
      g = temporal_attention_backward(g, caches.tattn[l], m.store, m.tattn[l], cfg, n);
  }
  codec_backward(g, caches.patches, queries, m.store, m.codec, cfg);
}

/// Decodes head outputs for [rows, C] track tokens into coordinates,
/// visibility and the occlusion decision.
template <typename S>
void decode_tokens(const Model<S>& m, const MatX<S>& track_tokens, TrackPrediction<S>& pred,
                   Index cell_offset, MatX<S>* px_out = nullptr, MatX<S>* py_out = nullptr) {
  const ModelConfig& cfg = m.cfg;
  HeadCache<S> hc;
  heads_forward(track_tokens, m.store, m.heads, hc);
  const int nbins = cfg.bins;
  const S ex = static_cast<S>(cfg.input_width), ey = static_cast<S>(cfg.input_height);
  const S radius = static_cast<S>(cfg.occlusion_radius(static_cast<double>(ex)));
  if (px_out) px_out->resize(track_tokens.rows(), nbins);
  if (py_out) py_out->resize(track_tokens.rows(), nbins);
  for (Index r = 0; r < track_tokens.rows(); ++r) {
    const std::size_t cell = static_cast<std::size_t>(cell_offset + r);
    const S vis = sigmoid(hc.v_logit(r, 0));
    pred.visible_prob[cell] = vis;
    pred.has_value[cell] = 1;
    if (cfg.head_type == HeadKind::kRegression) {
      pred.x[cell] = std::min(std::max(hc.logits(r, 0), S(0)), ex);
      pred.y[cell] = std::min(std::max(hc.logits(r, 1), S(0)), ey);
      pred.mass_in[cell] = S(1);
      pred.occluded[cell] = vis < S(0.5);
      continue;
    }
    VecX<S> px = ((hc.logits.block(r, 0, 1, nbins).array() -
                   hc.logits.block(r, 0, 1, nbins).maxCoeff()) /
                  static_cast<S>(cfg.temperature))
                     .exp()
                     .matrix()
                     .transpose();
    px /= px.sum();
    VecX<S> py = ((hc.logits.block(r, nbins, 1, nbins).array() -
                   hc.logits.block(r, nbins, 1, nbins).maxCoeff()) /
                  static_cast<S>(cfg.temperature))
                     .exp()
                     .matrix()
                     .transpose();
    py /= py.sum();
    const S dx = trunc_softargmax(px, cfg.softargmax_delta, ex);
    const S dy = trunc_softargmax(py, cfg.softargmax_delta, ey);
    S mass = S(0);
    const bool occ = uncertainty_occlusion(px, py, dx, dy, radius, ex, ey, vis, &mass);
    pred.x[cell] = dx;
    pred.y[cell] = dy;
    pred.mass_in[cell] = mass;
    pred.occluded[cell] = occ;
    if (px_out) px_out->row(r) = px.transpose();
    if (py_out) py_out->row(r) = py.transpose();
  }
}

/// Offline inference: forward + decode of the last layer's track tokens.
template <typename S>
TrackPrediction<S> predict_offline(const Model<S>& m, const VideoClip<S>& video,
                                   const std::vector<QueryPoint>& queries) {
  BackboneOutput<S> out = forward_offline(m, video, queries);
  TrackPrediction<S> pred;
  pred.resize(video.t_frames, static_cast<int>(queries.size()));
  if (!queries.empty())
    decode_tokens(m, out.per_layer_track_tokens.back(), pred, 0);
  return pred;
}

// ---------------------------------------------------------------------------
// streaming
// ---------------------------------------------------------------------------

/// Streaming state: per-layer recurrent banks for h*w image tubes plus a
/// fixed bank of point-track tubes. Track slots run mask-fed from frame 0 so
/// that a query injected later matches the offline token grid exactly;
/// `capacity` bounds how many queries can ever be injected.
template <typename S>
struct StreamingState {
  int frame_idx = 0;
  Index capacity = 0;
  std::vector<QueryPoint> registry;     // injected queries in slot order
  std::vector<MatX<S>> rec_states;      // per layer [hw + capacity, lru]

  Index tubes(const ModelConfig& cfg) const { return cfg.image_tokens() + capacity; }
};

/// Zeroed states with `queries_at_t0.size() + extra_capacity` track slots.
template <typename S>
StreamingState<S> init_streaming(const Model<S>& m, const std::vector<QueryPoint>& queries_at_t0,
                                 Index extra_capacity = 0) {
  require(m.cfg.temporal_block == TemporalBlockKind::kSsm,
          "init_streaming: streaming requires the SSM temporal block");
  for (const QueryPoint& q : queries_at_t0)
    require(q.t == 0, "init_streaming: all initial queries must have t = 0");
  StreamingState<S> st;
  st.capacity = static_cast<Index>(queries_at_t0.size()) + extra_capacity;
  st.registry = queries_at_t0;
  st.rec_states.assign(m.cfg.layers,
                       MatX<S>::Zero(m.cfg.image_tokens() + st.capacity, m.cfg.lru_width()));
  return st;
}

/// Advances every tube by one frame and decodes predictions for all injected
/// queries. Wall-clock cost is independent of the frame index.
template <typename S>
TrackPrediction<S> stream_step(const Model<S>& m, StreamingState<S>& st,
                               const VideoClip<S>& frame,
                               const std::vector<QueryPoint>& new_queries = {}) {
  const ModelConfig& cfg = m.cfg;
  require(frame.t_frames == 1, "stream_step: expected a single frame");
  require(frame.height == cfg.input_height && frame.width == cfg.input_width,
          "stream_step: frame size mismatch");
  for (const QueryPoint& q : new_queries) {
    require(q.t == st.frame_idx, "stream_step: query time must equal the current frame");
    require(static_cast<Index>(st.registry.size()) < st.capacity,
            "stream_step: no free track slots; raise the stream capacity");
    st.registry.push_back(q);
  }

  const Index hw = cfg.image_tokens();
  const Index n = hw + st.capacity;

  MatX<S> patches = patchify(frame, cfg.patch);
  MatX<S> grid(n, cfg.width);
  grid.topRows(hw) = embed_patches(patches, m.store, m.codec, cfg);
  const auto mask = m.store.value(m.codec.mask_token);
  for (Index s = 0; s < st.capacity; ++s) grid.row(hw + s) = mask.row(0);
  for (std::size_t s = 0; s < st.registry.size(); ++s) {
    const QueryPoint& q = st.registry[s];
    const bool inject = cfg.query_broadcast ? (st.frame_idx >= q.t) : (st.frame_idx == q.t);
    if (inject)
      grid.row(hw + static_cast<Index>(s)) = query_embedding<S>(q, cfg).transpose();
  }

  for (int l = 0; l < cfg.layers; ++l) {
    grid = recurrent_block_step(grid, m.store, m.rec[l], cfg, st.rec_states[l]);
    grid = spatial_block_forward(grid, m.store, m.spatial[l], cfg, n);
  }

  TrackPrediction<S> pred;
  pred.resize(1, static_cast<int>(st.registry.size()));
  std::vector<Index> injected;
  for (std::size_t s = 0; s < st.registry.size(); ++s)
    if (st.registry[s].t <= st.frame_idx) injected.push_back(static_cast<Index>(s));
  if (!injected.empty()) {
    MatX<S> tokens(static_cast<Index>(injected.size()), cfg.width);
    for (std::size_t i = 0; i < injected.size(); ++i) tokens.row(i) = grid.row(hw + injected[i]);
    TrackPrediction<S> sub;
    sub.resize(1, static_cast<int>(injected.size()));
    decode_tokens(m, tokens, sub, 0);
    for (std::size_t i = 0; i < injected.size(); ++i) {
      const std::size_t s = static_cast<std::size_t>(injected[i]);
      pred.x[s] = sub.x[i];
      pred.y[s] = sub.y[i];
      pred.visible_prob[s] = sub.visible_prob[i];
      pred.mass_in[s] = sub.mass_in[i];
      pred.occluded[s] = sub.occluded[i];
      pred.has_value[s] = 1;
    }
  }
  st.frame_idx += 1;
  return pred;
}

/// Streams a whole clip through stream_step; queries are injected at their
/// frames. Returns the same layout as predict_offline with `has_value` unset
/// before each query's injection frame.
template <typename S>
TrackPrediction<S> predict_streaming(const Model<S>& m, const VideoClip<S>& video,
                                     const std::vector<QueryPoint>& queries) {
  validate_queries(queries, video.t_frames, video.height, video.width);
  std::vector<QueryPoint> at0;
  for (const QueryPoint& q : queries)
    if (q.t == 0) at0.push_back(q);
  // slot order must match the query order for offline equivalence
  std::vector<int> slot_of(queries.size());
  {
    int slot = 0;
    for (std::size_t j = 0; j < queries.size(); ++j)
      if (queries[j].t == 0) slot_of[j] = slot++;
    int next = static_cast<int>(at0.size());
    for (std::size_t j = 0; j < queries.size(); ++j)
      if (queries[j].t != 0) slot_of[j] = next++;
  }
  StreamingState<S> st =
      init_streaming(m, at0, static_cast<Index>(queries.size() - at0.size()));
  TrackPrediction<S> full;
  full.resize(video.t_frames, static_cast<int>(queries.size()));
  for (int t = 0; t < video.t_frames; ++t) {
    VideoClip<S> frame;
    frame.t_frames = 1;
    frame.height = video.height;
    frame.width = video.width;
    frame.rgb.assign(video.frame_data(t), video.frame_data(t) + video.frame_values());
    std::vector<QueryPoint> now;
    for (const QueryPoint& q : queries)
      if (q.t == t && t > 0) now.push_back(q);
    TrackPrediction<S> step = stream_step(m, st, frame, now);
    for (std::size_t j = 0; j < queries.size(); ++j) {
      const int slot = slot_of[j];
      if (slot >= step.n_queries || !step.has_value[slot]) continue;
      const std::size_t cell = full.cell(t, static_cast<int>(j));
      full.x[cell] = step.x[slot];
      full.y[cell] = step.y[slot];
      full.visible_prob[cell] = step.visible_prob[slot];
      full.mass_in[cell] = step.mass_in[slot];
      full.occluded[cell] = step.occluded[slot];
      full.has_value[cell] = 1;
    }
  }
  return full;
}

}  // namespace tapmicro
