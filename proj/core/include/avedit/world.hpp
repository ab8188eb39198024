#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "avedit/codecs.hpp"
#include "avedit/model.hpp"
#include "avedit/random.hpp"

namespace avedit {

// Caption vocabulary of the blinking-beeper world. Token 0 is the null token.
namespace vocab {
inline constexpr std::size_t kSquare = 1;
inline constexpr std::size_t kKindBase = 2;  // kind k -> 2 + k
inline constexpr std::size_t kBeep = 10;
inline constexpr std::size_t kBandBase = 11;  // band k -> 11 + k
inline constexpr std::size_t kSize = 19;
}  // namespace vocab

struct WorldParams {
  CodecConfig codec;
  std::size_t object_size = 4;  // pixels, even
  std::size_t min_events = 1;
  std::size_t max_events = 3;
  std::size_t min_distractor_events = 1;
  std::size_t max_distractor_events = 2;
  double background = 0.0;
  double dim = 0.2;
  double lit = 1.0;
  double tone_amplitude = 0.5;
  double beep_seconds = 0.1;
  double noise_db = -30.0;  // base-audio noise floor relative to the tone amplitude

  void validate() const;
};

using Interval = std::pair<double, double>;  // [start, end) seconds

/// One synthetic sample. All signal values are float-representable so the
/// on-disk float32 format round-trips exactly.
struct Scene {
  std::uint64_t seed = 0;
  std::size_t band = 0;  // beep band class of the target, also its kind id
  std::size_t distractor_band = 0;
  std::vector<float> video;  // [F, H, W]
  std::vector<float> target_audio;
  std::vector<float> base_audio;
  PixelMask mask;
  std::vector<std::size_t> visual_caption;  // unpadded
  std::vector<std::size_t> audio_caption;
  std::vector<std::size_t> speech_caption;
  std::vector<std::size_t> target_frames;  // blink frames of the target
  std::vector<std::size_t> distractor_frames;
  std::vector<Interval> target_intervals;
  std::vector<Interval> protected_intervals;

  bool operator==(const Scene&) const = default;
};

class WorldError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Scene generate_scene(Rng& rng, const WorldParams& params);
Scene generate_scene(std::uint64_t seed, const WorldParams& params);

/// Throws WorldError describing the first violated scene invariant.
void check_scene(const Scene& scene, const WorldParams& params);

/// Scene latents in model space plus what is needed to rebuild the
/// conditioning after mask augmentation.
struct EncodedScene {
  Tensor video;         // z_v0, model space [F, H_l, W_l, 4]
  Tensor target_audio;  // z_a0, model space [N_a, bands]
  Tensor base_audio;    // b, model space
  Tensor reference;     // [1, H_l, W_l, 4]
  Tensor pixels;        // [F, H, W]
  PixelMask mask;
  std::vector<std::size_t> visual_caption;
  std::vector<std::size_t> audio_caption;
  std::vector<std::size_t> speech_caption;
};

EncodedScene encode_scene(const Scene& scene, const WorldParams& params, const LatentScaling& scaling = {});

/// Conditioning for `scene` with the given pixel mask: reference, masked video
/// (pixels inside the mask set to the background), latent mask, padded
/// captions and base audio.
ConditionBundle make_condition(const EncodedScene& scene, const PixelMask& mask, std::size_t caption_length,
                               double background = 0.0, const LatentScaling& scaling = {});

/// Edit instruction for the toy world: the target becomes kind/band `band`.
ConditionBundle with_band(ConditionBundle cond, std::size_t band);

// --- Dataset directory ------------------------------------------------------

struct DatasetManifest {
  std::size_t scene_count = 0;
  CodecConfig codec;
  std::uint64_t global_seed = 0;
  std::vector<std::string> files;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scene i is generated from seed derive_seed(global_seed, i).
std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t index);

DatasetManifest write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                              const CodecConfig& codec, std::uint64_t global_seed);
/// When `expected` is given, a manifest with a different codec is rejected.
std::vector<Scene> read_dataset(const std::filesystem::path& dir, const std::optional<CodecConfig>& expected = {});
DatasetManifest read_manifest(const std::filesystem::path& dir);

void write_scene(const Scene& scene, const std::filesystem::path& file);
Scene read_scene(const std::filesystem::path& file);

}  // namespace avedit
