// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "tapmicro/io.hpp"

using namespace tapmicro;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "tapmicro_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig io_cfg() {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.lru_expansion = 1;
  cfg.patch = 4;
  cfg.bins = 4;
  cfg.input_height = 8;
  cfg.input_width = 8;
  cfg.pos_embed_resolution = 16;
  cfg.head_hidden = 8;
  return cfg;
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("model config json round trip") {
    ModelConfig cfg = io_cfg();
    cfg.temporal_block = TemporalBlockKind::kAttention;
    cfg.head_type = HeadKind::kRegression;
    cfg.forget_gate_clamp_enabled = true;
    cfg.forget_gate_clamp_hi = 0.2;
    ModelConfig back = io::model_config_from_json(io::model_config_to_json(cfg));
    CHECK(back.layers == cfg.layers);
    CHECK(back.temporal_block == cfg.temporal_block);
    CHECK(back.head_type == cfg.head_type);
    CHECK(back.forget_gate_clamp_enabled);
    CHECK(back.forget_gate_clamp_hi == 0.2);
    CHECK(back.bins == cfg.bins);
  }

  TEST_CASE("train config json validation") {
    io::json j = io::train_config_to_json(TrainConfig{});
    j["peak_lr"] = -0.5;
    CHECK_THROWS_AS(io::train_config_from_json(j), ConfigError);
  }

  TEST_CASE("clip container round trip") {
    const fs::path dir = temp_dir("clip");
    VideoClip<float> clip = VideoClip<float>::zeros(2, 8, 8);
    Rng rng(1);
    for (auto& v : clip.rgb) v = uniform<float>(rng, 0.0f, 1.0f);
    io::save_clip(dir / "c", clip, 42);
    std::uint64_t seed = 0;
    VideoClip<float> back = io::load_clip(dir / "c", &seed);
    CHECK(seed == 42);
    CHECK(back.t_frames == 2);
    // 8-bit container: equal after quantization
    for (std::size_t i = 0; i < clip.rgb.size(); ++i)
      CHECK(std::abs(back.rgb[i] - clip.rgb[i]) <= 0.5f / 255.0f + 1e-6f);
    // second round trip is exact
    io::save_clip(dir / "c2", back, 42);
    VideoClip<float> back2 = io::load_clip(dir / "c2");
    CHECK(back2.rgb == back.rgb);
  }

  TEST_CASE("ground truth csv round trip") {
    const fs::path dir = temp_dir("gt");
    GroundTruth gt;
    gt.t_frames = 3;
    gt.n_points = 2;
    gt.x = {1.125, 2.5, 3.75, 4.0, 5.25, 6.5};
    gt.y = {0.5, 1.5, 2.25, 3.0, 4.125, 5.0};
    gt.visible = {1, 0, 1, 1, 0, 1};
    io::save_ground_truth_csv(dir / "gt.csv", gt);
    GroundTruth back = io::load_ground_truth_csv(dir / "gt.csv");
    CHECK(back.t_frames == 3);
    CHECK(back.n_points == 2);
    for (std::size_t i = 0; i < gt.x.size(); ++i) {
      CHECK(back.x[i] == doctest::Approx(gt.x[i]).epsilon(1e-9));
      CHECK(back.visible[i] == gt.visible[i]);
    }
    // parse(write(parse)) is exact
    io::save_ground_truth_csv(dir / "gt2.csv", back);
    GroundTruth twice = io::load_ground_truth_csv(dir / "gt2.csv");
    CHECK(twice.x == back.x);
    CHECK(twice.y == back.y);
  }

  TEST_CASE("query csv round trip") {
    const fs::path dir = temp_dir("queries");
    std::vector<QueryPoint> qs{{0, 1.5, 2.25}, {3, 14.0, 7.125}};
    io::save_queries_csv(dir / "q.csv", qs);
    auto back = io::load_queries_csv(dir / "q.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[1].t == 3);
    CHECK(back[1].x == doctest::Approx(14.0));
    CHECK(back[0].y == doctest::Approx(2.25));
  }

  TEST_CASE("track csv round trip with holes") {
    const fs::path dir = temp_dir("tracks");
    TrackPrediction<float> pred;
    pred.resize(3, 2);
    for (int t = 0; t < 3; ++t)
      for (int j = 0; j < 2; ++j) {
        const std::size_t c = pred.cell(t, j);
        pred.x[c] = 1.0f + t + 10 * j;
        pred.y[c] = 0.5f * t;
        pred.visible_prob[c] = 0.75f;
        pred.mass_in[c] = 0.9f;
        pred.occluded[c] = (t == 1);
        pred.has_value[c] = !(j == 1 && t == 0);
      }
    io::save_tracks_csv(dir / "t.csv", pred);
    auto rows = io::load_tracks_csv(dir / "t.csv");
    CHECK(rows.size() == 5);  // one hole
    for (const auto& r : rows) {
      CHECK(r.x == doctest::Approx(1.0 + r.frame + 10 * r.query_id));
      CHECK(r.visible == (r.frame != 1));
    }
  }

  TEST_CASE("dataset round trip") {
    const fs::path dir = temp_dir("dataset");
    Dataset<float> data;
    for (int i = 0; i < 2; ++i) {
      SceneSpec spec;
      spec.seed = 7 + i;
      spec.t_frames = 3;
      spec.height = 8;
      spec.width = 8;
      spec.points_per_sprite = 2;
      spec.bg_grid_step = 4;
      auto [clip, gt] = generate_clip<float>(spec);
      data.clips.push_back(std::move(clip));
      data.gts.push_back(std::move(gt));
      data.seeds.push_back(spec.seed);
    }
    io::save_dataset(dir, data, 7);
    Dataset<float> back = io::load_dataset(dir);
    REQUIRE(back.clips.size() == 2);
    CHECK(back.gts[0].n_points == data.gts[0].n_points);
    CHECK(back.seeds[1] == 8);
    CHECK(back.clips[0].t_frames == 3);
  }

  TEST_CASE("checkpoint round trips bit-exactly and verifies checksums") {
    const fs::path dir = temp_dir("ckpt");
    Model<float> m = Model<float>::build(io_cfg());
    m.init(5);
    TrainState<float> st;
    st.opt.init(m.store.size());
    st.step = 17;
    st.data_rng.seed(9);
    io::save_checkpoint(dir, m, &st, io::json{{"note", "test"}});

    io::LoadedCheckpoint back = io::load_checkpoint(dir, true);
    CHECK(back.model.store.flat() == m.store.flat());
    CHECK(back.state.step == 17);
    CHECK(back.has_opt_state);
    CHECK(back.state.rng_string() == st.rng_string());
    CHECK(back.manifest["extra"]["note"] == "test");

    // corrupt one byte: checksum must catch it
    {
      std::fstream f(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(10);
      char c;
      f.seekg(10);
      f.get(c);
      f.seekp(10);
      c = static_cast<char>(c ^ 0x7f);
      f.put(c);
    }
    CHECK_THROWS_AS(io::load_checkpoint(dir, false), IoError);
  }

  TEST_CASE("missing files raise io errors") {
    CHECK_THROWS_AS(io::load_clip("/nonexistent/clip"), IoError);
    CHECK_THROWS_AS(io::load_dataset("/nonexistent"), IoError);
    CHECK_THROWS_AS(io::load_checkpoint("/nonexistent", false), IoError);
  }

  TEST_CASE("png writer produces a file") {
    const fs::path dir = temp_dir("png");
    std::vector<unsigned char> rgb(16 * 8 * 3, 128);
    io::write_png(dir / "x.png", 16, 8, rgb);
    CHECK(fs::file_size(dir / "x.png") > 0);
    CHECK_THROWS_AS(io::write_png(dir / "y.png", 4, 4, rgb), ShapeError);
  }
}
