#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "avedit/tensor.hpp"

namespace avedit {

/// Geometry shared by the toy video and audio codecs.
struct CodecConfig {
  std::size_t frames = 8;
  std::size_t height = 16;  // pixels
  std::size_t width = 16;
  std::size_t fps = 8;
  std::size_t sample_rate = 8000;
  std::size_t window = 250;  // audio samples per latent token (hop == window)
  std::size_t bands = 8;

  void validate() const;
  std::size_t grid_h() const { return height / 2; }
  std::size_t grid_w() const { return width / 2; }
  std::size_t samples() const { return sample_rate * frames / fps; }
  std::size_t audio_tokens() const { return (samples() + window - 1) / window; }
  double window_seconds() const { return static_cast<double>(window) / static_cast<double>(sample_rate); }
  bool operator==(const CodecConfig&) const = default;
};

inline constexpr std::size_t kVideoChannels = 4;  // 2x2 space-to-channel
inline constexpr double kEnergyFloor = 1e-8;

/// values: [F, H/2, W/2, 4]; channel c = 2*dy + dx of the source patch.
struct VideoLatent {
  Tensor values;
  std::size_t frames() const { return values.dim(0); }
};

/// values: [N_a, bands] log band energies.
struct AudioLatent {
  Tensor values;
  std::size_t tokens() const { return values.dim(0); }
};

/// Boolean grid [F, H, W] stored row-major; used for both pixel and latent masks.
struct BoolGrid {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> flags;

  static BoolGrid empty(std::size_t f, std::size_t h, std::size_t w) {
    return {f, h, w, std::vector<std::uint8_t>(f * h * w, 0)};
  }
  bool at(std::size_t f, std::size_t y, std::size_t x) const { return flags[(f * height + y) * width + x] != 0; }
  void set(std::size_t f, std::size_t y, std::size_t x, bool v) { flags[(f * height + y) * width + x] = v; }
  std::size_t count() const;
  bool operator==(const BoolGrid&) const = default;
};

using PixelMask = BoolGrid;
using LatentMask = BoolGrid;

/// pixels: [F, H, W] grayscale. Lossless space-to-channel rearrangement.
VideoLatent video_encode(const Tensor& pixels);
Tensor video_decode(const VideoLatent& latent);

/// Non-overlapping windows of config.window samples (last one zero padded);
/// each emits log(max(band power, 1e-8)) for config.bands equal-width DFT
/// magnitude bands spanning 0..Nyquist.
AudioLatent audio_encode(std::span<const double> signal, const CodecConfig& config);
AudioLatent audio_encode(std::span<const float> signal, const CodecConfig& config);

/// Per-token total energy: sum over bands of exp(feature).
std::vector<double> audio_envelope(const AudioLatent& latent);

/// Band containing DFT bin `bin` of a `window`-point transform.
std::size_t band_of_bin(std::size_t bin, const CodecConfig& config);
/// Centre frequency (Hz) of band k.
double band_center_hz(std::size_t band, const CodecConfig& config);

/// OR-pooling over each 2x2 patch.
LatentMask mask_to_latent(const PixelMask& pixel_mask);

/// Fixed affine map between codec latents and the unit-scale space the
/// network denoises in. Video: 2x - 1. Audio: (f - audio_shift) / audio_scale.
struct LatentScaling {
  double audio_shift = -10.0;
  double audio_scale = 4.0;

  Tensor video_to_model(const Tensor& codec) const;
  Tensor video_from_model(const Tensor& model) const;
  Tensor audio_to_model(const Tensor& codec) const;
  Tensor audio_from_model(const Tensor& model) const;
};

}  // namespace avedit
