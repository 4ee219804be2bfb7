// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end optimization: AdamW with decoupled weight decay, linear warmup
// plus cosine decay, global gradient-norm clipping, and reverse-mode
// gradients through the whole fixed graph (the recurrence is differentiated
// through the scan, no truncation).
#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tapmicro/eval.hpp"

namespace tapmicro {

struct TrainConfig {
  int steps = 5000;
  int warmup_steps = 250;
  double peak_lr = 1e-3;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  int batch_videos = 8;
  int queries_per_video = 32;
  double t0_prob = 0.8;
  LossWeights loss;
  bool intermediate_losses = true;
  std::uint64_t seed = 0;
  int log_interval = 50;
  int checkpoint_interval = 1000;
  int val_clips = 64;
  int val_queries_per_clip = 16;
  std::string preset = "toy";

  void validate() const {
    require(steps > 0 && warmup_steps >= 0 && warmup_steps < steps,
            "train config: need 0 <= warmup < steps");
    require(peak_lr > 0, "train config: peak_lr must be positive");
    require(weight_decay >= 0 && grad_clip_norm >= 0, "train config: negative decay/clip");
    require(batch_videos > 0 && queries_per_video > 0, "train config: bad batch shape");
    require(t0_prob >= 0 && t0_prob <= 1, "train config: t0_prob must be in [0,1]");
    require(log_interval > 0 && checkpoint_interval > 0, "train config: bad intervals");
  }

  /// Reference-scale preset mirroring the published training recipe.
  static TrainConfig paper_s() {
    TrainConfig c;
    c.steps = 300000;
    c.warmup_steps = 2500;
    c.peak_lr = 1e-3;
    c.batch_videos = 256;
    c.queries_per_video = 256;
    c.preset = "paper-s";
    return c;
  }
};

/// Linear 0 -> peak over the warmup, then cosine decay to 0.
inline double lr_schedule(long step, const TrainConfig& cfg) {
  require(step >= 0 && step <= cfg.steps, "lr_schedule: step out of range");
  if (step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  const double u = static_cast<double>(step - cfg.warmup_steps) /
                   static_cast<double>(cfg.steps - cfg.warmup_steps);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * u));
}

template <typename S>
struct AdamW {
  std::vector<S> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(std::size_t n) {
    m.assign(n, S(0));
    v.assign(n, S(0));
    step = 0;
  }

  /// One update from the store's accumulated gradients. Returns the global
  /// gradient norm before clipping.
  double update(ParamStore<S>& store, double lr, double weight_decay, double clip_norm) {
    require(m.size() == store.size(), "adamw: optimizer state size mismatch");
    auto& g = store.flat_grad();
    double norm_sq = 0;
    for (S gv : g) norm_sq += static_cast<double>(gv) * static_cast<double>(gv);
    const double norm = std::sqrt(norm_sq);
    const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    auto& p = store.flat();
    for (const TensorEntry& e : store.entries()) {
      const std::size_t idx = &e - store.entries().data();
      const double wd = store.decays(idx) ? weight_decay : 0.0;
      for (std::size_t i = e.offset; i < e.offset + e.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * scale;
        m[i] = static_cast<S>(beta1 * m[i] + (1.0 - beta1) * gi);
        v[i] = static_cast<S>(beta2 * v[i] + (1.0 - beta2) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] = static_cast<S>(p[i] - lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]));
      }
    }
    return norm;
  }
};

/// Builds loss targets for one clip from its ground truth and query batch.
/// Coordinates are clamped into the classifier range; visibility labels are
/// zero before each query's frame.
template <typename S>
TrackTargets<S> make_targets(const GroundTruth& gt, const QueryBatch& batch,
                             const ModelConfig& cfg) {
  const int t_len = gt.t_frames;
  const int q = static_cast<int>(batch.queries.size());
  TrackTargets<S> t;
  t.x.resize(static_cast<std::size_t>(t_len) * q);
  t.y.resize(t.x.size());
  t.vis_label.resize(t.x.size());
  t.coord_mask.resize(t.x.size());
  for (int f = 0; f < t_len; ++f)
    for (int j = 0; j < q; ++j) {
      const std::size_t cell = static_cast<std::size_t>(f) * q + j;
      const std::size_t g = gt.cell(f, batch.point_index[j]);
      t.x[cell] = static_cast<S>(std::clamp(gt.x[g], 0.0, static_cast<double>(cfg.input_width)));
      t.y[cell] = static_cast<S>(std::clamp(gt.y[g], 0.0, static_cast<double>(cfg.input_height)));
      t.vis_label[cell] = static_cast<S>(batch.vis_target[cell]);
      t.coord_mask[cell] = batch.coord_loss_mask[cell];
    }
  return t;
}

/// Loss (and optionally gradients) for one clip. `grad_scale` = 0 skips the
/// backward pass; otherwise parameter gradients accumulate scaled by it.
template <typename S>
LossBreakdown video_loss(Model<S>& m, const VideoClip<S>& clip,
                         const std::vector<QueryPoint>& queries, const TrackTargets<S>& targets,
                         const LossWeights& w, bool intermediate_losses, S grad_scale) {
  const ModelConfig& cfg = m.cfg;
  const bool want_grads = grad_scale != S(0);
  OfflineCaches<S> caches;
  BackboneOutput<S> out = forward_offline(m, clip, queries, want_grads ? &caches : nullptr);

  std::vector<int> taps;
  if (intermediate_losses)
    for (int l = 0; l < cfg.layers; ++l) taps.push_back(l);
  else
    taps.push_back(cfg.layers - 1);
  const S layer_scale = S(1) / static_cast<S>(taps.size());

  LossBreakdown total;
  std::vector<MatX<S>> dtrack(cfg.layers);
  for (int l : taps) {
    HeadCache<S> hc;
    heads_forward(out.per_layer_track_tokens[l], m.store, m.heads, hc);
    MatX<S> dlogits, dvlogit;
    LossBreakdown lb =
        layer_loss(hc.logits, hc.v_logit, targets, cfg, w, grad_scale * layer_scale,
                   want_grads ? &dlogits : nullptr, want_grads ? &dvlogit : nullptr);
    total.total += lb.total * static_cast<double>(layer_scale);
    total.huber += lb.huber * static_cast<double>(layer_scale);
    total.ce += lb.ce * static_cast<double>(layer_scale);
    total.vis += lb.vis * static_cast<double>(layer_scale);
    if (want_grads) dtrack[l] = heads_backward(hc, dlogits, dvlogit, m.store, m.heads);
  }
  if (want_grads) backward_offline(m, caches, dtrack, queries, clip.t_frames);
  if (!std::isfinite(total.total)) {
    std::ostringstream os;
    os << "non-finite loss: total=" << total.total << " huber=" << total.huber
       << " ce=" << total.ce << " vis=" << total.vis;
    throw NumericError(os.str());
  }
  return total;
}

template <typename S>
struct TrainBatchItem {
  const VideoClip<S>* clip = nullptr;
  const GroundTruth* gt = nullptr;
  QueryBatch batch;
};

/// One optimization step over a batch; returns the mean loss breakdown and
/// the pre-clip gradient norm. Deterministic: items are processed in order.
template <typename S>
LossBreakdown train_step(Model<S>& m, AdamW<S>& opt, const TrainConfig& cfg,
                         const std::vector<TrainBatchItem<S>>& items, double lr,
                         double* grad_norm_out = nullptr) {
  m.store.zero_grad();
  LossBreakdown mean;
  const S scale = S(1) / static_cast<S>(items.size());
  for (const TrainBatchItem<S>& item : items) {
    TrackTargets<S> targets = make_targets<S>(*item.gt, item.batch, m.cfg);
    LossBreakdown lb = video_loss(m, *item.clip, item.batch.queries, targets, cfg.loss,
                                  cfg.intermediate_losses, scale);
    mean.total += lb.total * static_cast<double>(scale);
    mean.huber += lb.huber * static_cast<double>(scale);
    mean.ce += lb.ce * static_cast<double>(scale);
    mean.vis += lb.vis * static_cast<double>(scale);
  }
  const double norm = opt.update(m.store, lr, cfg.weight_decay, cfg.grad_clip_norm);
  if (grad_norm_out) *grad_norm_out = norm;
  return mean;
}

/// Central finite differences against the analytic gradient on a random
/// subsample of parameters. `loss_fn` must be a pure function of the store
/// values. Returns the maximum relative error.
template <typename S>
double grad_check(const std::function<double()>& loss_fn, ParamStore<S>& store, double epsilon,
                  int samples, Rng& rng) {
  const auto& grad = store.flat_grad();
  auto& flat = store.flat();
  double max_rel = 0;
  std::uniform_int_distribution<std::size_t> pick(0, flat.size() - 1);
  for (int k = 0; k < samples; ++k) {
    const std::size_t i = pick(rng);
    const S saved = flat[i];
    const double h = epsilon * std::max(1.0, std::abs(static_cast<double>(saved)));
    flat[i] = static_cast<S>(saved + h);
    const double up = loss_fn();
    flat[i] = static_cast<S>(saved - h);
    const double down = loss_fn();
    flat[i] = saved;
    const double fd = (up - down) / (2 * h);
    const double an = static_cast<double>(grad[i]);
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// dataset-level loop
// ---------------------------------------------------------------------------

template <typename S>
struct Dataset {
  std::vector<VideoClip<S>> clips;
  std::vector<GroundTruth> gts;
  std::vector<std::uint64_t> seeds;
  std::size_t size() const { return clips.size(); }
};

/// delta-avg on a fixed t=0 query protocol over (up to) `max_clips` clips.
template <typename S>
double validation_delta(const Model<S>& m, const Dataset<S>& data, int max_clips,
                        int queries_per_clip) {
  try {
    return evaluate_first_protocol(m, data, max_clips, queries_per_clip).delta_avg;
  } catch (const ConfigError&) {
    return 0.0;
  }
}

struct TrainLogEntry {
  long step = 0;
  double lr = 0;
  LossBreakdown loss;
  double grad_norm = 0;
  double val_delta_avg = -1;  // -1 when not evaluated at this step
};

template <typename S>
struct TrainState {
  AdamW<S> opt;
  long step = 0;
  Rng data_rng;

  std::string rng_string() const {
    std::ostringstream os;
    os << data_rng;
    return os.str();
  }
  void set_rng_string(const std::string& s) {
    std::istringstream is(s);
    is >> data_rng;
  }
};

/// Runs (steps - state.step) optimization steps. `on_log` fires every
/// log_interval steps and at the last step; `on_checkpoint` every
/// checkpoint_interval steps and at the end. Resuming from a saved state is
/// bit-identical to an uninterrupted run given the same dataset.
template <typename S>
void train_run(Model<S>& m, TrainState<S>& state, const TrainConfig& cfg, const Dataset<S>& data,
               const Dataset<S>* val_data,
               const std::function<void(const TrainLogEntry&)>& on_log,
               const std::function<void(long)>& on_checkpoint) {
  cfg.validate();
  require(data.size() > 0, "train: empty dataset");
  if (state.opt.m.empty()) state.opt.init(m.store.size());
  if (state.step == 0) state.data_rng.seed(mix_seed(cfg.seed, 0xdd));

  for (long step = state.step; step < cfg.steps; ++step) {
    std::vector<TrainBatchItem<S>> items;
    items.reserve(cfg.batch_videos);
    for (int b = 0; b < cfg.batch_videos; ++b) {
      const int idx = uniform_int(state.data_rng, 0, static_cast<int>(data.size()) - 1);
      TrainBatchItem<S> item;
      item.clip = &data.clips[idx];
      item.gt = &data.gts[idx];
      item.batch = sample_queries(*item.gt, cfg.queries_per_video, cfg.t0_prob,
                                  mix_seed(cfg.seed, 0xabc0 + static_cast<std::uint64_t>(step) *
                                                                  cfg.batch_videos +
                                                              b));
      items.push_back(std::move(item));
    }
    const double lr = lr_schedule(step, cfg);
    double grad_norm = 0;
    LossBreakdown lb = train_step(m, state.opt, cfg, items, lr, &grad_norm);
    state.step = step + 1;

    const bool last = state.step == cfg.steps;
    if (on_log && (state.step % cfg.log_interval == 0 || last)) {
      TrainLogEntry e;
      e.step = state.step;
      e.lr = lr;
      e.loss = lb;
      e.grad_norm = grad_norm;
      if (val_data && (state.step % (cfg.log_interval * 4) == 0 || last))
        e.val_delta_avg = validation_delta(m, *val_data, cfg.val_clips, cfg.val_queries_per_clip);
      on_log(e);
    }
    if (on_checkpoint && (state.step % cfg.checkpoint_interval == 0 || last))
      on_checkpoint(state.step);
  }
}

}  // namespace tapmicro
