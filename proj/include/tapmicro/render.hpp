// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Track overlays: one PNG per frame with per-query colored markers and
// motion tails. Visible predictions draw filled markers, occluded ones
// hollow markers.
#pragma once

#include <filesystem>
#include <vector>

#include "tapmicro/io.hpp"

namespace tapmicro {

struct RenderOptions {
  int upscale = 8;      // nearest-neighbor pixel scale
  int tail_frames = 8;  // how many past positions to draw
};

/// Writes frame_00000.png ... into `out_dir`; returns the file names.
std::vector<std::string> render_tracks(const VideoClip<float>& video,
                                       const std::vector<io::TrackRow>& tracks,
                                       const std::filesystem::path& out_dir,
                                       const RenderOptions& opts = {});

}  // namespace tapmicro
