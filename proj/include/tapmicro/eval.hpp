// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// TAP-Vid style metrics (OA, delta-avg, AJ), query-first and query-strided
// protocols (forward/backward runs for mid-video queries), support-point
// grids, and the attention probe. Coordinates are compared after rescale to
// the 256x256 evaluation convention; metrics average within each video and
// then across videos.
#pragma once

#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "tapmicro/backbone.hpp"
#include "tapmicro/synthetic.hpp"

namespace tapmicro {

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t{1, 2, 4, 8, 16};
  return t;
}

/// One (video, query, frame) cell, coordinates already at eval resolution.
struct EvalRecord {
  int video_id = 0;
  double pred_x = 0, pred_y = 0;
  bool pred_visible = false;
  double gt_x = 0, gt_y = 0;
  bool gt_visible = false;
};

namespace detail {

inline double distance(const EvalRecord& r) {
  return std::hypot(r.pred_x - r.gt_x, r.pred_y - r.gt_y);
}

template <typename F>
double mean_over_videos(const std::vector<EvalRecord>& records, F&& per_video) {
  std::map<int, std::vector<const EvalRecord*>> by_video;
  for (const EvalRecord& r : records) by_video[r.video_id].push_back(&r);
  double sum = 0;
  int count = 0;
  for (const auto& [vid, rs] : by_video) {
    double value;
    if (per_video(rs, &value)) {
      sum += value;
      ++count;
    }
  }
  require(count > 0, "metrics: no scorable videos");
  return sum / count;
}

}  // namespace detail

/// Fraction of cells whose visible/occluded classification is correct,
/// averaged per video then over videos.
inline double occlusion_accuracy(const std::vector<EvalRecord>& records) {
  require(!records.empty(), "occlusion_accuracy: empty input");
  return detail::mean_over_videos(records,
                                  [](const std::vector<const EvalRecord*>& rs, double* out) {
                                    int ok = 0;
                                    for (const auto* r : rs)
                                      ok += (r->pred_visible == r->gt_visible);
                                    *out = static_cast<double>(ok) / rs.size();
                                    return true;
                                  });
}

/// Mean over thresholds of the within-threshold fraction, over GT-visible
/// cells only.
inline double delta_avg(const std::vector<EvalRecord>& records,
                        const std::vector<double>& thresholds = default_thresholds()) {
  require(!records.empty(), "delta_avg: empty input");
  bool any_visible = false;
  for (const EvalRecord& r : records) any_visible |= r.gt_visible;
  require(any_visible, "delta_avg: no visible ground-truth cells");
  return detail::mean_over_videos(
      records, [&](const std::vector<const EvalRecord*>& rs, double* out) {
        int visible = 0;
        std::vector<int> within(thresholds.size(), 0);
        for (const auto* r : rs) {
          if (!r->gt_visible) continue;
          ++visible;
          const double d = detail::distance(*r);
          for (std::size_t i = 0; i < thresholds.size(); ++i) within[i] += (d <= thresholds[i]);
        }
        if (visible == 0) return false;
        double acc = 0;
        for (std::size_t i = 0; i < thresholds.size(); ++i)
          acc += static_cast<double>(within[i]) / visible;
        *out = acc / thresholds.size();
        return true;
      });
}

/// Threshold-averaged Jaccard of joint position-and-visibility correctness
/// (TAP-Vid convention). Thresholds with an empty denominator are excluded
/// from a video's average.
inline double average_jaccard(const std::vector<EvalRecord>& records,
                              const std::vector<double>& thresholds = default_thresholds()) {
  require(!records.empty(), "average_jaccard: empty input");
  return detail::mean_over_videos(
      records, [&](const std::vector<const EvalRecord*>& rs, double* out) {
        double acc = 0;
        int used = 0;
        for (double tau : thresholds) {
          int tp = 0, fn = 0, fp = 0;
          for (const auto* r : rs) {
            const bool close = detail::distance(*r) <= tau;
            if (r->gt_visible) {
              if (r->pred_visible && close)
                ++tp;
              else
                ++fn;
            } else if (r->pred_visible) {
              ++fp;
            }
          }
          if (tp + fn + fp == 0) continue;
          acc += static_cast<double>(tp) / (tp + fn + fp);
          ++used;
        }
        if (used == 0) return false;
        *out = acc / used;
        return true;
      });
}

/// Builds records for all (frame, query) cells that carry a prediction.
/// Coordinates are scaled by (sx, sy) into the evaluation resolution.
template <typename S>
void append_records(std::vector<EvalRecord>* records, const TrackPrediction<S>& pred,
                    const GroundTruth& gt, const std::vector<int>& point_index, int video_id,
                    double sx, double sy) {
  for (int t = 0; t < pred.t_frames; ++t)
    for (int j = 0; j < pred.n_queries; ++j) {
      const std::size_t cell = pred.cell(t, j);
      if (!pred.has_value[cell]) continue;
      EvalRecord r;
      r.video_id = video_id;
      r.pred_x = static_cast<double>(pred.x[cell]) * sx;
      r.pred_y = static_cast<double>(pred.y[cell]) * sy;
      r.pred_visible = !pred.occluded[cell];
      const std::size_t g = gt.cell(t, point_index[j]);
      r.gt_x = gt.x[g] * sx;
      r.gt_y = gt.y[g] * sy;
      r.gt_visible = gt.visible[g] != 0;
      records->push_back(r);
    }
}

// ---------------------------------------------------------------------------
// strided protocol
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
VideoClip<S> subclip(const VideoClip<S>& video, int from, int to, int step) {
  VideoClip<S> out;
  out.height = video.height;
  out.width = video.width;
  out.t_frames = std::abs(to - from) + 1;
  out.rgb.reserve(static_cast<std::size_t>(out.t_frames) * video.frame_values());
  for (int t = from; step > 0 ? t <= to : t >= to; t += step)
    out.rgb.insert(out.rgb.end(), video.frame_data(t), video.frame_data(t) + video.frame_values());
  return out;
}

}  // namespace detail

/// Full-length track for one query on a causal model: a streaming run over
/// frames [t_q, T) and a second streaming run over the reversed prefix
/// [t_q, 0], concatenated; the query frame is taken from the forward run.
template <typename S>
TrackPrediction<S> strided_eval(const Model<S>& m, const VideoClip<S>& video,
                                const QueryPoint& query) {
  require(query.t >= 0 && query.t < video.t_frames, "strided_eval: query frame out of range");
  QueryPoint q0 = query;
  q0.t = 0;

  VideoClip<S> fwd_clip = detail::subclip(video, query.t, video.t_frames - 1, +1);
  TrackPrediction<S> fwd = predict_streaming(m, fwd_clip, {q0});

  TrackPrediction<S> full;
  full.resize(video.t_frames, 1);
  for (int u = query.t; u < video.t_frames; ++u) {
    const std::size_t src = fwd.cell(u - query.t, 0);
    const std::size_t dst = full.cell(u, 0);
    full.x[dst] = fwd.x[src];
    full.y[dst] = fwd.y[src];
    full.visible_prob[dst] = fwd.visible_prob[src];
    full.mass_in[dst] = fwd.mass_in[src];
    full.occluded[dst] = fwd.occluded[src];
    full.has_value[dst] = 1;
  }
  if (query.t > 0) {
    VideoClip<S> bwd_clip = detail::subclip(video, query.t, 0, -1);
    TrackPrediction<S> bwd = predict_streaming(m, bwd_clip, {q0});
    for (int u = 0; u < query.t; ++u) {
      const std::size_t src = bwd.cell(query.t - u, 0);
      const std::size_t dst = full.cell(u, 0);
      full.x[dst] = bwd.x[src];
      full.y[dst] = bwd.y[src];
      full.visible_prob[dst] = bwd.visible_prob[src];
      full.mass_in[dst] = bwd.mass_in[src];
      full.occluded[dst] = bwd.occluded[src];
      full.has_value[dst] = 1;
    }
  }
  return full;
}

// ---------------------------------------------------------------------------
// support points
// ---------------------------------------------------------------------------

/// The query itself followed by an m x m global lattice over the frame and a
/// k x k local grid in a square of side 2*local_radius around the query, all
/// at the query's t and clamped to frame bounds. Support predictions are
/// discarded from metrics by the caller.
inline std::vector<QueryPoint> build_support_grid(const QueryPoint& query, int local_k,
                                                  double local_radius, int global_m, int height,
                                                  int width) {
  require(local_k >= 0 && global_m >= 0, "build_support_grid: grid sizes must be >= 0");
  std::vector<QueryPoint> out{query};
  for (int i = 0; i < global_m; ++i)
    for (int j = 0; j < global_m; ++j) {
      QueryPoint p;
      p.t = query.t;
      p.x = (j + 0.5) * width / global_m;
      p.y = (i + 0.5) * height / global_m;
      out.push_back(p);
    }
  for (int i = 0; i < local_k; ++i)
    for (int j = 0; j < local_k; ++j) {
      QueryPoint p;
      p.t = query.t;
      const double ox = local_k > 1 ? -local_radius + 2.0 * local_radius * j / (local_k - 1) : 0.0;
      const double oy = local_k > 1 ? -local_radius + 2.0 * local_radius * i / (local_k - 1) : 0.0;
      p.x = std::clamp(query.x + ox, 0.0, static_cast<double>(width));
      p.y = std::clamp(query.y + oy, 0.0, static_cast<double>(height));
      out.push_back(p);
    }
  return out;
}

// ---------------------------------------------------------------------------
// dataset protocols
// ---------------------------------------------------------------------------

struct DatasetEvalResult {
  double aj = 0, delta_avg = 0, oa = 0;
  std::vector<double> delta_per_threshold;
  std::vector<EvalRecord> records;
};

namespace detail {

inline void finish_eval(DatasetEvalResult* r) {
  r->oa = occlusion_accuracy(r->records);
  r->delta_avg = delta_avg(r->records);
  r->aj = average_jaccard(r->records);
  for (double tau : default_thresholds())
    r->delta_per_threshold.push_back(delta_avg(r->records, {tau}));
}

}  // namespace detail

/// Query-first protocol: joint tracking of up to `queries_per_clip` points
/// visible at frame 0 of each clip, compared at the 256-convention scale.
template <typename S, typename Data>
DatasetEvalResult evaluate_first_protocol(const Model<S>& m, const Data& data, int max_clips,
                                          int queries_per_clip) {
  DatasetEvalResult result;
  const double sx = 256.0 / m.cfg.input_width, sy = 256.0 / m.cfg.input_height;
  const int n_clips = std::min<int>(max_clips, static_cast<int>(data.size()));
  for (int v = 0; v < n_clips; ++v) {
    const GroundTruth& gt = data.gts[v];
    std::vector<QueryPoint> queries;
    std::vector<int> point_index;
    for (int p = 0; p < gt.n_points && static_cast<int>(queries.size()) < queries_per_clip; ++p) {
      if (!gt.visible[gt.cell(0, p)]) continue;
      queries.push_back(QueryPoint{0, gt.x[gt.cell(0, p)], gt.y[gt.cell(0, p)]});
      point_index.push_back(p);
    }
    if (queries.empty()) continue;
    TrackPrediction<S> pred = predict_offline(m, data.clips[v], queries);
    append_records(&result.records, pred, gt, point_index, v, sx, sy);
  }
  require(!result.records.empty(), "evaluate_first_protocol: no scorable queries");
  detail::finish_eval(&result);
  return result;
}

/// Query-strided protocol: queries sampled every `frame_stride` frames along
/// each track (where visible), each tracked independently with the
/// forward/backward runs and scored over all frames.
template <typename S, typename Data>
DatasetEvalResult evaluate_strided_protocol(const Model<S>& m, const Data& data, int max_clips,
                                            int queries_per_clip, int frame_stride) {
  require(frame_stride >= 1, "evaluate_strided_protocol: stride must be >= 1");
  DatasetEvalResult result;
  const double sx = 256.0 / m.cfg.input_width, sy = 256.0 / m.cfg.input_height;
  const int n_clips = std::min<int>(max_clips, static_cast<int>(data.size()));
  for (int v = 0; v < n_clips; ++v) {
    const GroundTruth& gt = data.gts[v];
    int used = 0;
    for (int p = 0; p < gt.n_points && used < queries_per_clip; ++p) {
      for (int t = 0; t < gt.t_frames && used < queries_per_clip; t += frame_stride) {
        if (!gt.visible[gt.cell(t, p)]) continue;
        QueryPoint q{t, gt.x[gt.cell(t, p)], gt.y[gt.cell(t, p)]};
        TrackPrediction<S> pred = strided_eval(m, data.clips[v], q);
        append_records(&result.records, pred, gt, std::vector<int>{p}, v, sx, sy);
        ++used;
      }
    }
  }
  require(!result.records.empty(), "evaluate_strided_protocol: no scorable queries");
  detail::finish_eval(&result);
  return result;
}

// ---------------------------------------------------------------------------
// attention probe
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionProbeEntry {
  int layer = 0, frame = 0, head = 0;
  AttentionQuadrants<S> quadrants;
};

/// Runs the model with attention capture on the selected layers and splits
/// each captured map into its four quadrants. Selection of heads/frames is a
/// pure filter. Empty selectors produce empty output.
template <typename S>
std::vector<AttentionProbeEntry<S>> attention_probe(const Model<S>& m, const VideoClip<S>& video,
                                                    const std::vector<QueryPoint>& queries,
                                                    const std::set<int>& layer_sel,
                                                    const std::set<int>& head_sel,
                                                    const std::set<int>& frame_sel) {
  std::vector<AttentionProbeEntry<S>> out;
  if (layer_sel.empty()) return out;
  AttentionCapture<S> capture;
  capture.layers = layer_sel;
  forward_offline<S>(m, video, queries, nullptr, &capture);
  const int hw = m.cfg.image_tokens();
  const int q = static_cast<int>(queries.size());
  for (std::size_t i = 0; i < capture.maps.size(); ++i) {
    const auto [layer, frame, head] = capture.id[i];
    if (!head_sel.empty() && head_sel.count(head) == 0) continue;
    if (!frame_sel.empty() && frame_sel.count(frame) == 0) continue;
    AttentionProbeEntry<S> e;
    e.layer = layer;
    e.frame = frame;
    e.head = head;
    e.quadrants = split_attention_quadrants(capture.maps[i], hw, q);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace tapmicro
