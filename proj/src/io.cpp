// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tapmicro/io.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace tapmicro::io {

namespace {

constexpr int kCheckpointFormatVersion = 1;
constexpr int kDatasetFormatVersion = 1;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return std::string(buf);
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw IoError("short write: " + path.string());
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open: " + path.string());
  const std::streamsize n = is.tellg();
  is.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(n));
  is.read(buf.data(), n);
  if (!is) throw IoError("short read: " + path.string());
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

json load_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError("bad json in " + path.string() + ": " + e.what());
  }
  return j;
}

void save_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// configs
// ---------------------------------------------------------------------------

json model_config_to_json(const ModelConfig& c) {
  json j;
  j["layers"] = c.layers;
  j["width"] = c.width;
  j["heads"] = c.heads;
  j["lru_expansion"] = c.lru_expansion;
  j["patch"] = c.patch;
  j["bins"] = c.bins;
  j["softargmax_delta"] = c.softargmax_delta;
  j["temperature"] = c.temperature;
  j["pos_embed_resolution"] = c.pos_embed_resolution;
  j["input_height"] = c.input_height;
  j["input_width"] = c.input_width;
  j["temporal_block"] = c.temporal_block == TemporalBlockKind::kSsm ? "ssm" : "attention";
  j["head_type"] = c.head_type == HeadKind::kClassification ? "classification" : "regression";
  j["head_hidden"] = c.head_hidden;
  j["decay_c"] = c.decay_c;
  j["forget_gate_clamp"] =
      c.forget_gate_clamp_enabled
          ? json{{"lo", c.forget_gate_clamp_lo}, {"hi", c.forget_gate_clamp_hi}}
          : json(nullptr);
  j["query_broadcast"] = c.query_broadcast;
  j["occlusion_radius_base"] = c.occlusion_radius_base;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.lru_expansion = j.value("lru_expansion", c.lru_expansion);
    c.patch = j.value("patch", c.patch);
    c.bins = j.value("bins", c.bins);
    c.softargmax_delta = j.value("softargmax_delta", c.softargmax_delta);
    c.temperature = j.value("temperature", c.temperature);
    c.pos_embed_resolution = j.value("pos_embed_resolution", c.pos_embed_resolution);
    c.input_height = j.value("input_height", c.input_height);
    c.input_width = j.value("input_width", c.input_width);
    const std::string tb = j.value("temporal_block", "ssm");
    require(tb == "ssm" || tb == "attention", "config: temporal_block must be ssm|attention");
    c.temporal_block = tb == "ssm" ? TemporalBlockKind::kSsm : TemporalBlockKind::kAttention;
    const std::string ht = j.value("head_type", "classification");
    require(ht == "classification" || ht == "regression",
            "config: head_type must be classification|regression");
    c.head_type = ht == "classification" ? HeadKind::kClassification : HeadKind::kRegression;
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.decay_c = j.value("decay_c", c.decay_c);
    if (j.contains("forget_gate_clamp") && !j["forget_gate_clamp"].is_null()) {
      c.forget_gate_clamp_enabled = true;
      c.forget_gate_clamp_lo = j["forget_gate_clamp"].value("lo", 0.0);
      c.forget_gate_clamp_hi = j["forget_gate_clamp"].value("hi", 0.1);
    }
    c.query_broadcast = j.value("query_broadcast", false);
    c.occlusion_radius_base = j.value("occlusion_radius_base", c.occlusion_radius_base);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  json j;
  j["steps"] = c.steps;
  j["warmup_steps"] = c.warmup_steps;
  j["peak_lr"] = c.peak_lr;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["batch_videos"] = c.batch_videos;
  j["queries_per_video"] = c.queries_per_video;
  j["t0_prob"] = c.t0_prob;
  j["loss"] = {{"huber", c.loss.huber},       {"ce", c.loss.ce},
               {"vis", c.loss.vis},           {"huber_reg", c.loss.huber_reg},
               {"use_ce", c.loss.use_ce},     {"use_huber", c.loss.use_huber}};
  j["intermediate_losses"] = c.intermediate_losses;
  j["seed"] = c.seed;
  j["log_interval"] = c.log_interval;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["val_clips"] = c.val_clips;
  j["val_queries_per_clip"] = c.val_queries_per_clip;
  j["preset"] = c.preset;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
    c.batch_videos = j.value("batch_videos", c.batch_videos);
    c.queries_per_video = j.value("queries_per_video", c.queries_per_video);
    c.t0_prob = j.value("t0_prob", c.t0_prob);
    if (j.contains("loss")) {
      const json& l = j["loss"];
      c.loss.huber = l.value("huber", c.loss.huber);
      c.loss.ce = l.value("ce", c.loss.ce);
      c.loss.vis = l.value("vis", c.loss.vis);
      c.loss.huber_reg = l.value("huber_reg", c.loss.huber_reg);
      c.loss.use_ce = l.value("use_ce", c.loss.use_ce);
      c.loss.use_huber = l.value("use_huber", c.loss.use_huber);
    }
    c.intermediate_losses = j.value("intermediate_losses", c.intermediate_losses);
    c.seed = j.value("seed", c.seed);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.val_clips = j.value("val_clips", c.val_clips);
    c.val_queries_per_clip = j.value("val_queries_per_clip", c.val_queries_per_clip);
    c.preset = j.value("preset", c.preset);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

json scene_spec_to_json(const SceneSpec& s) {
  json j;
  j["seed"] = s.seed;
  j["t_frames"] = s.t_frames;
  j["height"] = s.height;
  j["width"] = s.width;
  j["min_sprites"] = s.min_sprites;
  j["max_sprites"] = s.max_sprites;
  j["max_speed"] = s.max_speed;
  j["max_pan"] = s.max_pan;
  j["blur_taps"] = s.blur_taps;
  j["blur_shutter"] = s.blur_shutter;
  j["bg_grid_step"] = s.bg_grid_step;
  j["points_per_sprite"] = s.points_per_sprite;
  j["sinusoidal"] = s.sinusoidal;
  return j;
}

SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  try {
    s.seed = j.value("seed", s.seed);
    s.t_frames = j.value("t_frames", s.t_frames);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.min_sprites = j.value("min_sprites", s.min_sprites);
    s.max_sprites = j.value("max_sprites", s.max_sprites);
    s.max_speed = j.value("max_speed", s.max_speed);
    s.max_pan = j.value("max_pan", s.max_pan);
    s.blur_taps = j.value("blur_taps", s.blur_taps);
    s.blur_shutter = j.value("blur_shutter", s.blur_shutter);
    s.bg_grid_step = j.value("bg_grid_step", s.bg_grid_step);
    s.points_per_sprite = j.value("points_per_sprite", s.points_per_sprite);
    s.sinusoidal = j.value("sinusoidal", s.sinusoidal);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// clip container
// ---------------------------------------------------------------------------

void save_clip(const fs::path& stem, const VideoClip<Scalar>& clip, std::uint64_t seed) {
  std::vector<unsigned char> bytes(clip.rgb.size());
  for (std::size_t i = 0; i < clip.rgb.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(clip.rgb[i], 0.0f, 1.0f) * 255));
  write_bytes(fs::path(stem.string() + ".rgb8"), bytes.data(), bytes.size());
  json side;
  side["T"] = clip.t_frames;
  side["H"] = clip.height;
  side["W"] = clip.width;
  side["seed"] = seed;
  save_json(fs::path(stem.string() + ".json"), side);
}

VideoClip<Scalar> load_clip(const fs::path& stem, std::uint64_t* seed_out) {
  const json side = load_json(fs::path(stem.string() + ".json"));
  VideoClip<Scalar> clip;
  clip.t_frames = side.at("T").get<int>();
  clip.height = side.at("H").get<int>();
  clip.width = side.at("W").get<int>();
  if (seed_out) *seed_out = side.value("seed", 0ull);
  const std::vector<char> bytes = read_bytes(fs::path(stem.string() + ".rgb8"));
  const std::size_t expected =
      static_cast<std::size_t>(clip.t_frames) * clip.height * clip.width * 3;
  if (bytes.size() != expected)
    throw IoError("clip size mismatch in " + stem.string() + ".rgb8");
  clip.rgb.resize(expected);
  for (std::size_t i = 0; i < expected; ++i)
    clip.rgb[i] = static_cast<unsigned char>(bytes[i]) / 255.0f;
  return clip;
}

// ---------------------------------------------------------------------------
// CSVs
// ---------------------------------------------------------------------------

void save_ground_truth_csv(const fs::path& path, const GroundTruth& gt) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "point_id,frame,x,y,visible\n";
  char buf[128];
  for (int p = 0; p < gt.n_points; ++p)
    for (int t = 0; t < gt.t_frames; ++t) {
      const std::size_t c = gt.cell(t, p);
      std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%d\n", p, t, gt.x[c], gt.y[c],
                    gt.visible[c] ? 1 : 0);
      os << buf;
    }
}

GroundTruth load_ground_truth_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  std::getline(is, line);  // header
  struct Row {
    int p, t;
    double x, y;
    int vis;
  };
  std::vector<Row> rows;
  int max_p = -1, max_t = -1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw IoError("bad ground truth row: " + line);
    Row r{std::stoi(f[0]), std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoi(f[4])};
    max_p = std::max(max_p, r.p);
    max_t = std::max(max_t, r.t);
    rows.push_back(r);
  }
  GroundTruth gt;
  gt.n_points = max_p + 1;
  gt.t_frames = max_t + 1;
  gt.x.assign(static_cast<std::size_t>(gt.t_frames) * gt.n_points, 0.0);
  gt.y.assign(gt.x.size(), 0.0);
  gt.visible.assign(gt.x.size(), 0);
  for (const Row& r : rows) {
    const std::size_t c = gt.cell(r.t, r.p);
    gt.x[c] = r.x;
    gt.y[c] = r.y;
    gt.visible[c] = r.vis ? 1 : 0;
  }
  return gt;
}

void save_queries_csv(const fs::path& path, const std::vector<QueryPoint>& queries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "query_id,t,x,y\n";
  char buf[128];
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%d,%.6f,%.6f\n", i, queries[i].t, queries[i].x,
                  queries[i].y);
    os << buf;
  }
}

std::vector<QueryPoint> load_queries_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<QueryPoint> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw IoError("bad query row: " + line);
    QueryPoint q;
    q.t = std::stoi(f[1]);
    q.x = std::stod(f[2]);
    q.y = std::stod(f[3]);
    out.push_back(q);
  }
  return out;
}

void save_tracks_csv(const fs::path& path, const TrackPrediction<Scalar>& pred) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "query_id,frame,x,y,visible,mass_in_radius\n";
  char buf[160];
  for (int j = 0; j < pred.n_queries; ++j)
    for (int t = 0; t < pred.t_frames; ++t) {
      const std::size_t c = pred.cell(t, j);
      if (!pred.has_value[c]) continue;
      std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%d,%.6f\n", j, t,
                    static_cast<double>(pred.x[c]), static_cast<double>(pred.y[c]),
                    pred.occluded[c] ? 0 : 1, static_cast<double>(pred.mass_in[c]));
      os << buf;
    }
}

std::vector<TrackRow> load_tracks_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<TrackRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw IoError("bad track row: " + line);
    TrackRow r;
    r.query_id = std::stoi(f[0]);
    r.frame = std::stoi(f[1]);
    r.x = std::stod(f[2]);
    r.y = std::stod(f[3]);
    r.visible = std::stoi(f[4]) != 0;
    r.mass_in_radius = std::stod(f[5]);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

namespace {
std::string clip_stem(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%05d", i);
  return buf;
}
}  // namespace

void save_dataset(const fs::path& dir, const Dataset<Scalar>& data, std::uint64_t base_seed) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["clips"] = data.clips.size();
  manifest["base_seed"] = base_seed;
  if (!data.clips.empty()) {
    manifest["t_frames"] = data.clips[0].t_frames;
    manifest["height"] = data.clips[0].height;
    manifest["width"] = data.clips[0].width;
  }
  save_json(dir / "manifest.json", manifest);
  for (std::size_t i = 0; i < data.clips.size(); ++i) {
    const std::string stem = clip_stem(static_cast<int>(i));
    save_clip(dir / stem, data.clips[i], data.seeds.empty() ? 0 : data.seeds[i]);
    save_ground_truth_csv(dir / (stem + "_gt.csv"), data.gts[i]);
  }
}

Dataset<Scalar> load_dataset(const fs::path& dir) {
  const json manifest = load_json(dir / "manifest.json");
  const std::size_t n = manifest.at("clips").get<std::size_t>();
  Dataset<Scalar> data;
  data.clips.reserve(n);
  data.gts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string stem = clip_stem(static_cast<int>(i));
    std::uint64_t seed = 0;
    data.clips.push_back(load_clip(dir / stem, &seed));
    data.seeds.push_back(seed);
    data.gts.push_back(load_ground_truth_csv(dir / (stem + "_gt.csv")));
  }
  return data;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& dir, const Model<Scalar>& model,
                     const TrainState<Scalar>* state, const json& extra) {
  fs::create_directories(dir);
  const auto& flat = model.store.flat();
  write_bytes(dir / "params.bin", flat.data(), flat.size() * sizeof(Scalar));

  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = "float32";
  manifest["model"] = model_config_to_json(model.cfg);
  manifest["param_count"] = flat.size();
  json tensors = json::array();
  for (std::size_t i = 0; i < model.store.entries().size(); ++i) {
    const TensorEntry& e = model.store.entries()[i];
    tensors.push_back({{"name", e.name},
                       {"rows", e.rows},
                       {"cols", e.cols},
                       {"offset", e.offset},
                       {"checksum", hex64(model.store.checksum(i))}});
  }
  manifest["tensors"] = tensors;
  if (!extra.is_null()) manifest["extra"] = extra;
  if (state) {
    manifest["step"] = state->step;
    manifest["opt"] = {{"beta1", state->opt.beta1},
                       {"beta2", state->opt.beta2},
                       {"eps", state->opt.eps},
                       {"opt_step", state->opt.step}};
    manifest["data_rng"] = state->rng_string();
    std::vector<Scalar> opt_blob;
    opt_blob.reserve(state->opt.m.size() + state->opt.v.size());
    opt_blob.insert(opt_blob.end(), state->opt.m.begin(), state->opt.m.end());
    opt_blob.insert(opt_blob.end(), state->opt.v.begin(), state->opt.v.end());
    write_bytes(dir / "opt.bin", opt_blob.data(), opt_blob.size() * sizeof(Scalar));
  }
  save_json(dir / "manifest.json", manifest);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, bool with_opt_state) {
  LoadedCheckpoint out;
  out.manifest = load_json(dir / "manifest.json");
  if (out.manifest.value("format_version", -1) != kCheckpointFormatVersion)
    throw IoError("unsupported checkpoint format in " + dir.string());
  if (out.manifest.value("dtype", "") != "float32")
    throw IoError("unsupported checkpoint dtype in " + dir.string());
  out.model = Model<Scalar>::build(model_config_from_json(out.manifest.at("model")));

  const std::vector<char> blob = read_bytes(dir / "params.bin");
  auto& flat = out.model.store.flat();
  if (blob.size() != flat.size() * sizeof(Scalar))
    throw IoError("checkpoint parameter blob size mismatch in " + dir.string());
  std::memcpy(flat.data(), blob.data(), blob.size());

  for (std::size_t i = 0; i < out.model.store.entries().size(); ++i) {
    const TensorEntry& e = out.model.store.entries()[i];
    const json& t = out.manifest.at("tensors").at(i);
    if (t.at("name").get<std::string>() != e.name ||
        t.at("rows").get<Index>() != e.rows || t.at("cols").get<Index>() != e.cols)
      throw IoError("checkpoint tensor layout mismatch at " + e.name);
    if (t.at("checksum").get<std::string>() != hex64(out.model.store.checksum(i)))
      throw IoError("checkpoint checksum mismatch at " + e.name);
  }

  out.state.step = out.manifest.value("step", 0l);
  if (with_opt_state && fs::exists(dir / "opt.bin")) {
    const std::vector<char> ob = read_bytes(dir / "opt.bin");
    const std::size_t n = flat.size();
    if (ob.size() != 2 * n * sizeof(Scalar))
      throw IoError("checkpoint optimizer blob size mismatch in " + dir.string());
    out.state.opt.m.resize(n);
    out.state.opt.v.resize(n);
    std::memcpy(out.state.opt.m.data(), ob.data(), n * sizeof(Scalar));
    std::memcpy(out.state.opt.v.data(), ob.data() + n * sizeof(Scalar), n * sizeof(Scalar));
    if (out.manifest.contains("opt"))
      out.state.opt.step = out.manifest["opt"].value("opt_step", 0l);
    if (out.manifest.contains("data_rng"))
      out.state.set_rng_string(out.manifest["data_rng"].get<std::string>());
    out.has_opt_state = true;
  }
  return out;
}

void write_run_manifest(const fs::path& dir, const std::string& command, const json& config,
                        std::uint64_t seed, const std::vector<std::string>& artifacts,
                        double wall_clock_sec) {
  fs::create_directories(dir);
  json j;
  j["command"] = command;
  j["config"] = config;
  j["config_hash"] = hex64(fnv1a64(config.dump().data(), config.dump().size()));
  j["seed"] = seed;
  j["artifacts"] = artifacts;
  j["wall_clock_sec"] = wall_clock_sec;
  j["tool_version"] = "tapmicro 0.1.0";
  save_json(dir / "run_manifest.json", j);
}

}  // namespace tapmicro::io
