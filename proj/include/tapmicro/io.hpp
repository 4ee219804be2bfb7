// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats:
//  - clip container: raw RGB8 tensor (row-major T,H,W,3) + JSON sidecar
//  - ground truth / query / track CSVs (coordinates with 6 decimals)
//  - checkpoint: params.bin blob + manifest.json (config echo, per-tensor
//    name/shape/checksum, format version) + optional optimizer state
//  - datasets: directory of clips with a manifest
#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "tapmicro/backbone.hpp"
#include "tapmicro/trainer.hpp"

namespace tapmicro::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

using Scalar = float;

json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const json& j);
json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const json& j);
json scene_spec_to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const json& j);

// clip container
void save_clip(const fs::path& stem, const VideoClip<Scalar>& clip, std::uint64_t seed);
VideoClip<Scalar> load_clip(const fs::path& stem, std::uint64_t* seed_out = nullptr);

// ground truth CSV: point_id,frame,x,y,visible
void save_ground_truth_csv(const fs::path& path, const GroundTruth& gt);
GroundTruth load_ground_truth_csv(const fs::path& path);

// query CSV: query_id,t,x,y
void save_queries_csv(const fs::path& path, const std::vector<QueryPoint>& queries);
std::vector<QueryPoint> load_queries_csv(const fs::path& path);

// track CSV: query_id,frame,x,y,visible,mass_in_radius
void save_tracks_csv(const fs::path& path, const TrackPrediction<Scalar>& pred);
struct TrackRow {
  int query_id = 0;
  int frame = 0;
  double x = 0, y = 0;
  bool visible = false;
  double mass_in_radius = 0;
};
std::vector<TrackRow> load_tracks_csv(const fs::path& path);

// dataset directory
void save_dataset(const fs::path& dir, const Dataset<Scalar>& data, std::uint64_t base_seed);
Dataset<Scalar> load_dataset(const fs::path& dir);

// checkpoint directory
void save_checkpoint(const fs::path& dir, const Model<Scalar>& model,
                     const TrainState<Scalar>* state, const json& extra);
struct LoadedCheckpoint {
  Model<Scalar> model;
  TrainState<Scalar> state;
  bool has_opt_state = false;
  json manifest;
};
LoadedCheckpoint load_checkpoint(const fs::path& dir, bool with_opt_state);

// run manifest (one per CLI command)
void write_run_manifest(const fs::path& dir, const std::string& command, const json& config,
                        std::uint64_t seed, const std::vector<std::string>& artifacts,
                        double wall_clock_sec);

// JSON helpers
json load_json(const fs::path& path);
void save_json(const fs::path& path, const json& j);

// PNG output (render / probe overlays)
void write_png(const fs::path& path, int width, int height, const std::vector<unsigned char>& rgb);

}  // namespace tapmicro::io
