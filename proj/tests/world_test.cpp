#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "avedit/world.hpp"

namespace avedit {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("avedit_world_" + name);
  fs::remove_all(dir);
  return dir;
}

TEST(World, InvariantsHoldOver500Seeds) {
  WorldParams p;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const Scene s = generate_scene(seed, p);
    ASSERT_NO_THROW(check_scene(s, p)) << "seed " << seed;
    EXPECT_NE(s.band, s.distractor_band);
    EXPECT_GE(s.target_frames.size(), 1u);
    EXPECT_LE(s.target_frames.size(), 3u);
    for (std::size_t f : s.target_frames) {
      EXPECT_EQ(std::count(s.distractor_frames.begin(), s.distractor_frames.end(), f), 0);
    }
    for (float v : s.video) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(World, FootprintsAreDisjoint) {
  WorldParams p;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Scene s = generate_scene(seed, p);
    const auto& c = p.codec;
    // Pixels that are ever non-background outside the mask belong to the distractor.
    std::size_t distractor_px = 0;
    for (std::size_t y = 0; y < c.height; ++y) {
      for (std::size_t x = 0; x < c.width; ++x) {
        bool drawn = false;
        for (std::size_t f = 0; f < c.frames; ++f) drawn |= s.video[(f * c.height + y) * c.width + x] != 0.0f;
        if (drawn && !s.mask.at(0, y, x)) ++distractor_px;
      }
    }
    EXPECT_EQ(distractor_px, p.object_size * p.object_size) << "seed " << seed;
  }
}

TEST(World, SeedDeterminism) {
  WorldParams p;
  EXPECT_EQ(generate_scene(42, p), generate_scene(42, p));
  EXPECT_FALSE(generate_scene(42, p) == generate_scene(43, p));
}

TEST(World, CaptionsEncodeIdentityAndBand) {
  const Scene s = generate_scene(7, WorldParams{});
  EXPECT_EQ(s.visual_caption, (std::vector<std::size_t>{vocab::kSquare, vocab::kKindBase + s.band}));
  EXPECT_EQ(s.audio_caption, (std::vector<std::size_t>{vocab::kBeep, vocab::kBandBase + s.band}));
  EXPECT_TRUE(s.speech_caption.empty());
}

TEST(World, IntervalsMatchBeepFrames) {
  WorldParams p;
  const Scene s = generate_scene(3, p);
  ASSERT_EQ(s.target_intervals.size(), s.target_frames.size());
  for (std::size_t i = 0; i < s.target_frames.size(); ++i) {
    EXPECT_DOUBLE_EQ(s.target_intervals[i].first, s.target_frames[i] / 8.0);
    EXPECT_NEAR(s.target_intervals[i].second - s.target_intervals[i].first, 0.1, 1e-6);
  }
}

TEST(World, NoDistractorEventsGivesPureNoiseFloor) {
  WorldParams p;
  p.min_distractor_events = 0;
  p.max_distractor_events = 0;
  const double noise = p.tone_amplitude * std::pow(10.0, p.noise_db / 20.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = generate_scene(seed, p);
    EXPECT_TRUE(s.protected_intervals.empty());
    EXPECT_TRUE(s.distractor_frames.empty());
    double sum = 0.0, sq = 0.0;
    for (float v : s.base_audio) {
      sum += v;
      sq += double(v) * v;
    }
    const double n = static_cast<double>(s.base_audio.size());
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    EXPECT_NEAR(sd, noise, 0.1 * noise);
    EXPECT_NO_THROW(check_scene(s, p));
  }
}

TEST(World, TargetEnvelopeExceedsSilenceExactlyInBeepWindows) {
  WorldParams p;
  const auto& c = p.codec;
  const double silence = static_cast<double>(c.bands) * kEnergyFloor;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scene s = generate_scene(seed, p);
    const auto env = audio_envelope(audio_encode(std::span<const float>(s.target_audio), c));
    for (std::size_t j = 0; j < env.size(); ++j) {
      const double a = static_cast<double>(j) * c.window_seconds(), b = a + c.window_seconds();
      bool in_beep = false;
      for (const auto& [s0, s1] : s.target_intervals) in_beep |= a < s1 && s0 < b;
      EXPECT_EQ(env[j] > 10.0 * silence, in_beep) << "seed " << seed << " token " << j;
    }
  }
}

TEST(World, TargetToneLivesInItsBand) {
  WorldParams p;
  const Scene s = generate_scene(11, p);
  const AudioLatent z = audio_encode(std::span<const float>(s.target_audio), p.codec);
  const std::size_t j = s.target_frames.front() * 4;
  std::size_t best = 0;
  for (std::size_t b = 1; b < p.codec.bands; ++b) {
    if (z.values[j * 8 + b] > z.values[j * 8 + best]) best = b;
  }
  EXPECT_EQ(best, s.band);
}

TEST(World, InvalidParamsThrow) {
  WorldParams p;
  p.min_events = 0;
  EXPECT_THROW(generate_scene(0, p), std::invalid_argument);
  p = {};
  p.object_size = 40;
  EXPECT_THROW(generate_scene(0, p), std::invalid_argument);
  p = {};
  p.max_events = 4;
  EXPECT_THROW(generate_scene(0, p), std::invalid_argument);
}

TEST(World, CheckSceneRejectsBrokenScenes) {
  WorldParams p;
  Scene s = generate_scene(5, p);
  s.target_audio.back() = 0.25f;
  s.target_intervals.clear();
  s.target_frames.clear();
  EXPECT_THROW(check_scene(s, p), WorldError);
  s = generate_scene(5, p);
  s.mask.flags[0] = !s.mask.flags[0];
  EXPECT_THROW(check_scene(s, p), WorldError);
}

TEST(World, EncodedSceneShapes) {
  WorldParams p;
  const EncodedScene e = encode_scene(generate_scene(1, p), p);
  EXPECT_EQ(e.video.shape(), (Shape{8, 8, 8, 4}));
  EXPECT_EQ(e.target_audio.shape(), (Shape{32, 8}));
  EXPECT_EQ(e.base_audio.shape(), (Shape{32, 8}));
  EXPECT_EQ(e.reference.shape(), (Shape{1, 8, 8, 4}));
  const ConditionBundle c = make_condition(e, e.mask, 8);
  EXPECT_EQ(c.masked_video.shape(), e.video.shape());
  EXPECT_EQ(c.visual_caption.size(), 8u);
  ASSERT_TRUE(c.base_audio.has_value());
  // Masked pixels are blanked to the background, which maps to -1 in model space.
  const LatentMask& m = c.mask;
  for (std::size_t i = 0; i < m.flags.size(); ++i) {
    if (!m.flags[i]) continue;
    for (std::size_t ch = 0; ch < 4; ++ch) EXPECT_EQ(c.masked_video[i * 4 + ch], -1.0);
  }
}

TEST(World, WithBandSwapsOnlyBandTokens) {
  WorldParams p;
  const Scene s = generate_scene(2, p);
  const EncodedScene e = encode_scene(s, p);
  const ConditionBundle c = make_condition(e, e.mask, 8);
  const std::size_t other = (s.band + 3) % 8;
  const ConditionBundle d = with_band(c, other);
  EXPECT_EQ(d.visual_caption[0], vocab::kSquare);
  EXPECT_EQ(d.visual_caption[1], vocab::kKindBase + other);
  EXPECT_EQ(d.audio_caption[0], vocab::kBeep);
  EXPECT_EQ(d.audio_caption[1], vocab::kBandBase + other);
  EXPECT_EQ(max_abs_diff(d.reference, c.reference), 0.0);
  EXPECT_THROW(with_band(c, 8), std::invalid_argument);
}

TEST(Dataset, RoundTripTenScenes) {
  WorldParams p;
  std::vector<Scene> scenes;
  for (std::uint64_t i = 0; i < 10; ++i) scenes.push_back(generate_scene(derive_seed(9, i), p));
  const fs::path dir = scratch_dir("roundtrip");
  const DatasetManifest m = write_dataset(scenes, dir, p.codec, 9);
  EXPECT_EQ(m.scene_count, 10u);
  const auto back = read_dataset(dir, p.codec);
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) EXPECT_TRUE(back[i] == scenes[i]) << i;
  fs::remove_all(dir);
}

TEST(Dataset, ManifestListsExactlyTheFiles) {
  WorldParams p;
  const fs::path dir = scratch_dir("manifest");
  write_dataset({generate_scene(1, p), generate_scene(2, p), generate_scene(3, p)}, dir, p.codec, 0);
  const DatasetManifest m = read_manifest(dir);
  EXPECT_EQ(m.scene_count, 3u);
  std::vector<std::string> present;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".bin") present.push_back(entry.path().filename().string());
  }
  std::sort(present.begin(), present.end());
  EXPECT_EQ(present, m.files);
  fs::remove_all(dir);
}

TEST(Dataset, EmptyDataset) {
  const fs::path dir = scratch_dir("empty");
  write_dataset({}, dir, CodecConfig{}, 5);
  EXPECT_EQ(read_manifest(dir).scene_count, 0u);
  EXPECT_TRUE(read_dataset(dir).empty());
  fs::remove_all(dir);
}

TEST(Dataset, CodecMismatchIsExplicit) {
  WorldParams p;
  const fs::path dir = scratch_dir("mismatch");
  write_dataset({generate_scene(1, p)}, dir, p.codec, 0);
  CodecConfig other = p.codec;
  other.bands = 16;
  try {
    read_dataset(dir, other);
    FAIL() << "expected a mismatch";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("codec config mismatch"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Dataset, MissingAndCorruptFilesAreNamed) {
  WorldParams p;
  const fs::path dir = scratch_dir("corrupt");
  write_dataset({generate_scene(1, p), generate_scene(2, p)}, dir, p.codec, 0);
  fs::resize_file(dir / "scene_00001.bin", 40);
  try {
    read_dataset(dir);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("scene_00001.bin"), std::string::npos) << e.what();
  }
  fs::remove(dir / "scene_00000.bin");
  try {
    read_dataset(dir);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("scene_00000.bin"), std::string::npos) << e.what();
  }
  {
    std::ofstream(dir / "scene_00000.bin") << "not a scene";
  }
  EXPECT_THROW(read_dataset(dir), DatasetError);
  fs::remove_all(dir);
  EXPECT_THROW(read_manifest(dir), DatasetError);
}

TEST(Dataset, DeriveSeedSpreadsIndices) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 100; ++i) seeds.push_back(derive_seed(0, i));
  std::sort(seeds.begin(), seeds.end());
  EXPECT_EQ(std::unique(seeds.begin(), seeds.end()), seeds.end());
  EXPECT_NE(derive_seed(0, 1), derive_seed(1, 0));
}

}  // namespace
}  // namespace avedit
