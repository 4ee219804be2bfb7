// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Operator CLI. Exit codes: 0 success, 2 config error, 3 I/O error,
// 4 numeric failure.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "tapmicro/eval.hpp"
#include "tapmicro/io.hpp"
#include "tapmicro/render.hpp"
#include "tapmicro/trainer.hpp"

namespace tp = tapmicro;
using tp::io::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

tp::io::LoadedCheckpoint load_model_or_die(const std::string& checkpoint) {
  if (!fs::exists(fs::path(checkpoint) / "manifest.json"))
    throw tp::IoError("checkpoint not found: " + checkpoint);
  return tp::io::load_checkpoint(checkpoint, /*with_opt_state=*/false);
}

std::vector<tp::QueryPoint> queries_for_file(const std::string& path) {
  if (!fs::exists(path)) throw tp::IoError("query file not found: " + path);
  return tp::io::load_queries_csv(path);
}

// ---------------------------------------------------------------------------
// generate-data
// ---------------------------------------------------------------------------

int cmd_generate_data(const std::string& out, int clips, int frames, int size,
                      std::uint64_t seed, const tp::SceneSpec& proto) {
  const auto start = Clock::now();
  tp::Dataset<float> data;
  for (int i = 0; i < clips; ++i) {
    tp::SceneSpec spec = proto;
    spec.seed = tp::mix_seed(seed, static_cast<std::uint64_t>(i));
    spec.t_frames = frames;
    spec.height = size;
    spec.width = size;
    auto [clip, gt] = tp::generate_clip<float>(spec);
    data.clips.push_back(std::move(clip));
    data.gts.push_back(std::move(gt));
    data.seeds.push_back(spec.seed);
  }
  tp::io::save_dataset(out, data, seed);
  json cfg = tp::io::scene_spec_to_json(proto);
  cfg["clips"] = clips;
  cfg["frames"] = frames;
  cfg["size"] = size;
  tp::io::write_run_manifest(out, "generate-data", cfg, seed, {"manifest.json"},
                             seconds_since(start));
  std::printf("generated %d clips (%dx%dx%d) into %s\n", clips, frames, size, size, out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& val_dir, const std::string& out,
              const std::string& resume) {
  const auto start = Clock::now();
  const json cfg_json = tp::io::load_json(config_path);
  if (!cfg_json.contains("model") || !cfg_json.contains("train"))
    throw tp::ConfigError("train config must contain 'model' and 'train' sections");
  const tp::ModelConfig mcfg = tp::io::model_config_from_json(cfg_json["model"]);
  const tp::TrainConfig tcfg = tp::io::train_config_from_json(cfg_json["train"]);

  tp::Dataset<float> data = tp::io::load_dataset(data_dir);
  tp::require(!data.clips.empty(), "train: dataset is empty");
  for (const auto& clip : data.clips)
    tp::require(clip.height == mcfg.input_height && clip.width == mcfg.input_width,
                "train: dataset resolution does not match the model config");
  tp::Dataset<float> val;
  if (!val_dir.empty()) val = tp::io::load_dataset(val_dir);

  tp::Model<float> model;
  tp::TrainState<float> state;
  if (!resume.empty()) {
    tp::io::LoadedCheckpoint ck = tp::io::load_checkpoint(resume, /*with_opt_state=*/true);
    tp::require(ck.has_opt_state, "resume: checkpoint has no optimizer state");
    model = std::move(ck.model);
    state = std::move(ck.state);
    std::printf("resuming from %s at step %ld\n", resume.c_str(), state.step);
  } else {
    model = tp::Model<float>::build(mcfg);
    model.init(tcfg.seed);
  }

  fs::create_directories(out);
  std::FILE* log = std::fopen((fs::path(out) / "metrics.jsonl").string().c_str(),
                              resume.empty() ? "w" : "a");
  if (!log) throw tp::IoError("cannot open metrics log in " + out);

  auto on_log = [&](const tp::TrainLogEntry& e) {
    json j;
    j["step"] = e.step;
    j["lr"] = e.lr;
    j["loss"] = e.loss.total;
    j["loss_huber"] = e.loss.huber;
    j["loss_ce"] = e.loss.ce;
    j["loss_vis"] = e.loss.vis;
    j["grad_norm"] = e.grad_norm;
    if (e.val_delta_avg >= 0) j["val_delta_avg"] = e.val_delta_avg;
    std::fprintf(log, "%s\n", j.dump().c_str());
    std::fflush(log);
    std::printf("step %6ld  lr %.2e  loss %.4f (huber %.4f ce %.4f vis %.4f)", e.step, e.lr,
                e.loss.total, e.loss.huber, e.loss.ce, e.loss.vis);
    if (e.val_delta_avg >= 0) std::printf("  val delta_avg %.4f", e.val_delta_avg);
    std::printf("\n");
    std::fflush(stdout);
  };
  auto on_checkpoint = [&](long step) {
    json extra;
    extra["train"] = tp::io::train_config_to_json(tcfg);
    if (!val.clips.empty())
      extra["val_delta_avg"] =
          tp::validation_delta(model, val, tcfg.val_clips, tcfg.val_queries_per_clip);
    tp::io::save_checkpoint(fs::path(out) / "checkpoint", model, &state, extra);
    std::printf("checkpoint at step %ld\n", step);
    std::fflush(stdout);
  };

  tp::train_run(model, state, tcfg, data, val.clips.empty() ? nullptr : &val, on_log,
                on_checkpoint);
  std::fclose(log);

  json cfg_echo = cfg_json;
  tp::io::write_run_manifest(out, "train", cfg_echo, tcfg.seed,
                             {"checkpoint", "metrics.jsonl"}, seconds_since(start));
  return 0;
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

int cmd_track(const std::string& checkpoint, const std::string& video_stem,
              const std::string& queries_path, const std::string& mode, const std::string& out) {
  const auto start = Clock::now();
  tp::io::LoadedCheckpoint ck = load_model_or_die(checkpoint);
  tp::VideoClip<float> video = tp::io::load_clip(video_stem);
  std::vector<tp::QueryPoint> queries = queries_for_file(queries_path);
  tp::validate_queries(queries, video.t_frames, video.height, video.width);

  tp::TrackPrediction<float> pred;
  if (mode == "offline") {
    pred = tp::predict_offline(ck.model, video, queries);
  } else if (mode == "stream") {
    for (const tp::QueryPoint& q : queries)
      tp::require(q.t == 0, "stream mode requires t=0 queries; use --mode strided");
    pred = tp::predict_streaming(ck.model, video, queries);
  } else if (mode == "strided") {
    pred.resize(video.t_frames, static_cast<int>(queries.size()));
    for (std::size_t j = 0; j < queries.size(); ++j) {
      tp::TrackPrediction<float> one = tp::strided_eval(ck.model, video, queries[j]);
      for (int t = 0; t < video.t_frames; ++t) {
        const std::size_t src = one.cell(t, 0), dst = pred.cell(t, static_cast<int>(j));
        pred.x[dst] = one.x[src];
        pred.y[dst] = one.y[src];
        pred.visible_prob[dst] = one.visible_prob[src];
        pred.mass_in[dst] = one.mass_in[src];
        pred.occluded[dst] = one.occluded[src];
        pred.has_value[dst] = one.has_value[src];
      }
    }
  } else {
    throw tp::ConfigError("track: mode must be offline|stream|strided");
  }

  tp::io::save_tracks_csv(out, pred);
  json cfg;
  cfg["mode"] = mode;
  cfg["video"] = video_stem;
  cfg["queries"] = queries_path;
  tp::io::write_run_manifest(fs::path(out).parent_path().empty() ? "."
                                                                 : fs::path(out).parent_path(),
                             "track", cfg, 0, {out}, seconds_since(start));
  std::printf("wrote %s (%zu queries, %d frames, mode %s)\n", out.c_str(), queries.size(),
              video.t_frames, mode.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& protocol, int max_clips, int queries_per_clip, int stride,
             const std::string& out) {
  const auto start = Clock::now();
  tp::io::LoadedCheckpoint ck = load_model_or_die(checkpoint);
  tp::Dataset<float> data = tp::io::load_dataset(data_dir);

  tp::DatasetEvalResult r;
  if (protocol == "first")
    r = tp::evaluate_first_protocol(ck.model, data, max_clips, queries_per_clip);
  else if (protocol == "strided")
    r = tp::evaluate_strided_protocol(ck.model, data, max_clips, queries_per_clip, stride);
  else
    throw tp::ConfigError("eval: protocol must be first|strided");

  json report;
  report["AJ"] = r.aj;
  report["delta_avg"] = r.delta_avg;
  report["OA"] = r.oa;
  json per_thr;
  const auto& taus = tp::default_thresholds();
  for (std::size_t i = 0; i < taus.size(); ++i)
    per_thr[std::to_string(static_cast<int>(taus[i]))] = r.delta_per_threshold[i];
  report["delta_per_threshold"] = per_thr;
  json per_video = json::array();
  std::set<int> vids;
  for (const auto& rec : r.records) vids.insert(rec.video_id);
  for (int v : vids) {
    std::vector<tp::EvalRecord> sub;
    for (const auto& rec : r.records)
      if (rec.video_id == v) sub.push_back(rec);
    per_video.push_back({{"video", v},
                         {"AJ", tp::average_jaccard(sub)},
                         {"delta_avg", tp::delta_avg(sub)},
                         {"OA", tp::occlusion_accuracy(sub)}});
  }
  report["per_video"] = per_video;
  report["records"] = r.records.size();
  report["protocol"] = protocol;
  tp::io::save_json(out, report);

  json cfg;
  cfg["protocol"] = protocol;
  cfg["data"] = data_dir;
  cfg["clips"] = max_clips;
  cfg["queries_per_clip"] = queries_per_clip;
  tp::io::write_run_manifest(fs::path(out).parent_path().empty() ? "."
                                                                 : fs::path(out).parent_path(),
                             "eval", cfg, 0, {out}, seconds_since(start));
  std::printf("AJ %.4f  delta_avg %.4f  OA %.4f  (%zu records) -> %s\n", r.aj, r.delta_avg, r.oa,
              r.records.size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bench-latency
// ---------------------------------------------------------------------------

int cmd_bench_latency(const std::string& checkpoint, int frames, int n_queries, int warmup,
                      std::uint64_t seed, const std::string& out) {
  const auto start = Clock::now();
  tp::require(frames >= warmup + 10, "bench-latency: need frames >= warmup + 10");

  tp::Model<float> model;
  if (!checkpoint.empty()) {
    model = std::move(load_model_or_die(checkpoint).model);
  } else {
    model = tp::Model<float>::build(tp::ModelConfig::toy());
    model.init(seed);
  }
  const tp::ModelConfig& cfg = model.cfg;

  // deterministic noise frames
  tp::Rng rng(tp::mix_seed(seed, 0xbe7c));
  std::vector<tp::QueryPoint> queries;
  for (int j = 0; j < n_queries; ++j)
    queries.push_back(tp::QueryPoint{0, tp::uniform<double>(rng, 0, cfg.input_width),
                                     tp::uniform<double>(rng, 0, cfg.input_height)});
  tp::StreamingState<float> st = tp::init_streaming(model, queries);

  std::vector<double> step_ms(frames);
  tp::VideoClip<float> frame = tp::VideoClip<float>::zeros(1, cfg.input_height, cfg.input_width);
  double total_s = 0;
  for (int t = 0; t < frames; ++t) {
    for (auto& v : frame.rgb) v = tp::uniform<float>(rng, 0.0f, 1.0f);
    const auto t0 = Clock::now();
    tp::TrackPrediction<float> pred = tp::stream_step(model, st, frame);
    const double dt = seconds_since(t0);
    (void)pred;
    step_ms[t] = dt * 1e3;
    total_s += dt;
  }

  auto median_of = [&](int lo, int hi) {  // [lo, hi)
    std::vector<double> w(step_ms.begin() + lo, step_ms.begin() + hi);
    std::nth_element(w.begin(), w.begin() + w.size() / 2, w.end());
    return w[w.size() / 2];
  };
  const int w0 = std::min(warmup, frames - 60);
  const double med_early = median_of(w0, w0 + 50);
  const double med_late = median_of(frames - 50, frames);
  const double worst = *std::max_element(step_ms.begin() + w0, step_ms.end());
  const double fps = frames / total_s;
  const bool stationary = std::abs(med_late - med_early) <= 0.15 * med_early;

  json report;
  report["frames"] = frames;
  report["queries"] = n_queries;
  report["fps_avg"] = fps;
  report["latency_worst_ms"] = worst;
  report["step_median_early_ms"] = med_early;
  report["step_median_late_ms"] = med_late;
  report["stationary_within_15pct"] = stationary;
  tp::io::save_json(out, report);
  std::printf("fps %.1f  worst latency %.3f ms  median early/late %.3f/%.3f ms  stationary %s\n",
              fps, worst, med_early, med_late, stationary ? "yes" : "NO");
  json cfg_json;
  cfg_json["frames"] = frames;
  cfg_json["queries"] = n_queries;
  cfg_json["warmup"] = warmup;
  tp::io::write_run_manifest(fs::path(out).parent_path().empty() ? "."
                                                                 : fs::path(out).parent_path(),
                             "bench-latency", cfg_json, seed, {out}, seconds_since(start));
  if (!stationary) throw tp::NumericError("bench-latency: per-frame cost is not stationary");
  return 0;
}

// ---------------------------------------------------------------------------
// probe-attention
// ---------------------------------------------------------------------------

std::set<int> parse_int_set(const std::string& csv) {
  std::set<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.insert(std::stoi(tok));
  }
  return out;
}

int cmd_probe_attention(const std::string& checkpoint, const std::string& video_stem,
                        const std::string& queries_path, const std::string& layers,
                        const std::string& heads, const std::string& frames,
                        const std::string& out) {
  const auto start = Clock::now();
  tp::io::LoadedCheckpoint ck = load_model_or_die(checkpoint);
  tp::VideoClip<float> video = tp::io::load_clip(video_stem);
  std::vector<tp::QueryPoint> queries = queries_for_file(queries_path);

  const auto entries = tp::attention_probe(ck.model, video, queries, parse_int_set(layers),
                                           parse_int_set(heads), parse_int_set(frames));
  auto mat_to_json = [](const tp::MatX<float>& m) {
    json rows = json::array();
    for (tp::Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (tp::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  json j = json::array();
  for (const auto& e : entries) {
    j.push_back({{"layer", e.layer},
                 {"frame", e.frame},
                 {"head", e.head},
                 {"point_to_image", mat_to_json(e.quadrants.point_to_image)},
                 {"point_to_point", mat_to_json(e.quadrants.point_to_point)},
                 {"image_to_image", mat_to_json(e.quadrants.image_to_image)},
                 {"image_to_point", mat_to_json(e.quadrants.image_to_point)}});
  }
  tp::io::save_json(out, j);
  std::printf("captured %zu attention maps -> %s\n", entries.size(), out.c_str());
  json cfg;
  cfg["layers"] = layers;
  cfg["heads"] = heads;
  cfg["frames"] = frames;
  tp::io::write_run_manifest(fs::path(out).parent_path().empty() ? "."
                                                                 : fs::path(out).parent_path(),
                             "probe-attention", cfg, 0, {out}, seconds_since(start));
  return 0;
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

int cmd_render(const std::string& video_stem, const std::string& tracks_path,
               const std::string& out) {
  const auto start = Clock::now();
  tp::VideoClip<float> video = tp::io::load_clip(video_stem);
  std::vector<tp::io::TrackRow> tracks;
  if (!tracks_path.empty()) tracks = tp::io::load_tracks_csv(tracks_path);
  const auto files = tp::render_tracks(video, tracks, out);
  json cfg;
  cfg["video"] = video_stem;
  cfg["tracks"] = tracks_path;
  tp::io::write_run_manifest(out, "render", cfg, 0, files, seconds_since(start));
  std::printf("rendered %zu frames into %s\n", files.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tapmicro: toy-scale masked-token point tracker"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic sprite dataset");
  std::string gen_out;
  int gen_clips = 16, gen_frames = 16, gen_size = 32;
  std::uint64_t gen_seed = 0;
  tp::SceneSpec gen_proto;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--clips", gen_clips);
  gen->add_option("--frames", gen_frames);
  gen->add_option("--size", gen_size);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--min-sprites", gen_proto.min_sprites);
  gen->add_option("--max-sprites", gen_proto.max_sprites);
  gen->add_option("--max-speed", gen_proto.max_speed);
  gen->add_option("--max-pan", gen_proto.max_pan);
  gen->add_option("--blur-taps", gen_proto.blur_taps);

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_config, train_data, train_val, train_out, train_resume;
  train->add_option("--config", train_config)->required();
  train->add_option("--data", train_data)->required();
  train->add_option("--val-data", train_val);
  train->add_option("--out", train_out)->required();
  train->add_option("--resume", train_resume);

  // track
  auto* track = app.add_subcommand("track", "Track query points in a clip");
  std::string tr_ckpt, tr_video, tr_queries, tr_mode = "offline", tr_out;
  track->add_option("--checkpoint", tr_ckpt)->required();
  track->add_option("--video", tr_video)->required();
  track->add_option("--queries", tr_queries)->required();
  track->add_option("--mode", tr_mode);
  track->add_option("--out", tr_out)->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate on a dataset");
  std::string ev_ckpt, ev_data, ev_protocol = "first", ev_out;
  int ev_clips = 64, ev_qpc = 16, ev_stride = 5;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--protocol", ev_protocol);
  ev->add_option("--clips", ev_clips);
  ev->add_option("--queries-per-clip", ev_qpc);
  ev->add_option("--stride", ev_stride);
  ev->add_option("--out", ev_out)->required();

  // bench-latency
  auto* bench = app.add_subcommand("bench-latency", "Measure streaming per-frame cost");
  std::string be_ckpt, be_out = "bench.json";
  int be_frames = 500, be_queries = 64, be_warmup = 20;
  std::uint64_t be_seed = 0;
  bench->add_option("--checkpoint", be_ckpt);
  bench->add_option("--frames", be_frames);
  bench->add_option("--queries", be_queries);
  bench->add_option("--warmup", be_warmup);
  bench->add_option("--seed", be_seed);
  bench->add_option("--out", be_out);

  // probe-attention
  auto* probe = app.add_subcommand("probe-attention", "Dump attention quadrants");
  std::string pr_ckpt, pr_video, pr_queries, pr_layers, pr_heads, pr_frames, pr_out;
  probe->add_option("--checkpoint", pr_ckpt)->required();
  probe->add_option("--video", pr_video)->required();
  probe->add_option("--queries", pr_queries)->required();
  probe->add_option("--layers", pr_layers)->required();
  probe->add_option("--heads", pr_heads);
  probe->add_option("--frames", pr_frames);
  probe->add_option("--out", pr_out)->required();

  // render
  auto* render = app.add_subcommand("render", "Render track overlays to PNG");
  std::string re_video, re_tracks, re_out;
  render->add_option("--video", re_video)->required();
  render->add_option("--tracks", re_tracks);
  render->add_option("--out", re_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return cmd_generate_data(gen_out, gen_clips, gen_frames, gen_size, gen_seed, gen_proto);
    if (train->parsed())
      return cmd_train(train_config, train_data, train_val, train_out, train_resume);
    if (track->parsed()) return cmd_track(tr_ckpt, tr_video, tr_queries, tr_mode, tr_out);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_protocol, ev_clips, ev_qpc, ev_stride,
                                      ev_out);
    if (bench->parsed())
      return cmd_bench_latency(be_ckpt, be_frames, be_queries, be_warmup, be_seed, be_out);
    if (probe->parsed())
      return cmd_probe_attention(pr_ckpt, pr_video, pr_queries, pr_layers, pr_heads, pr_frames,
                                 pr_out);
    if (render->parsed()) return cmd_render(re_video, re_tracks, re_out);
  } catch (const tp::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const tp::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const tp::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  }
  return 2;
}
