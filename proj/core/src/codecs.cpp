#include "avedit/codecs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace avedit {

void CodecConfig::validate() const {
  if (frames == 0 || height == 0 || width == 0 || fps == 0 || sample_rate == 0 || window == 0 || bands == 0) {
    throw std::invalid_argument("CodecConfig: all extents must be positive");
  }
  if (height % 2 != 0 || width % 2 != 0) {
    throw std::invalid_argument("CodecConfig: pixel dimensions must be even");
  }
  if (bands > window / 2 + 1) throw std::invalid_argument("CodecConfig: more bands than DFT bins");
}

std::size_t BoolGrid::count() const {
  std::size_t n = 0;
  for (auto f : flags) n += f != 0;
  return n;
}

VideoLatent video_encode(const Tensor& pixels) {
  if (pixels.rank() != 3) throw ShapeError("video_encode: expected [F, H, W], got " + to_string(pixels.shape()));
  const std::size_t f = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("video_encode: odd pixel dimensions " + to_string(pixels.shape()));
  }
  const std::size_t hl = h / 2, wl = w / 2;
  std::vector<double> out(pixels.size());
  for (std::size_t t = 0; t < f; ++t) {
    for (std::size_t y = 0; y < hl; ++y) {
      for (std::size_t x = 0; x < wl; ++x) {
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            out[((t * hl + y) * wl + x) * kVideoChannels + 2 * dy + dx] =
                pixels[(t * h + 2 * y + dy) * w + 2 * x + dx];
          }
        }
      }
    }
  }
  return {Tensor::from({f, hl, wl, kVideoChannels}, std::move(out))};
}

Tensor video_decode(const VideoLatent& latent) {
  const Tensor& v = latent.values;
  if (v.rank() != 4 || v.dim(3) != kVideoChannels) {
    throw ShapeError("video_decode: expected [F, H/2, W/2, 4], got " + to_string(v.shape()));
  }
  const std::size_t f = v.dim(0), hl = v.dim(1), wl = v.dim(2), h = 2 * hl, w = 2 * wl;
  std::vector<double> out(v.size());
  for (std::size_t t = 0; t < f; ++t) {
    for (std::size_t y = 0; y < hl; ++y) {
      for (std::size_t x = 0; x < wl; ++x) {
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            out[(t * h + 2 * y + dy) * w + 2 * x + dx] = v[((t * hl + y) * wl + x) * kVideoChannels + 2 * dy + dx];
          }
        }
      }
    }
  }
  return Tensor::from({f, h, w}, std::move(out));
}

std::size_t band_of_bin(std::size_t bin, const CodecConfig& config) {
  const double hz = static_cast<double>(bin) * static_cast<double>(config.sample_rate) / static_cast<double>(config.window);
  const double band_width = 0.5 * static_cast<double>(config.sample_rate) / static_cast<double>(config.bands);
  return std::min(config.bands - 1, static_cast<std::size_t>(hz / band_width));
}

double band_center_hz(std::size_t band, const CodecConfig& config) {
  const double band_width = 0.5 * static_cast<double>(config.sample_rate) / static_cast<double>(config.bands);
  return (static_cast<double>(band) + 0.5) * band_width;
}

namespace {

template <typename Sample>
AudioLatent encode_impl(std::span<const Sample> signal, const CodecConfig& config) {
  config.validate();
  if (signal.empty()) throw std::invalid_argument("audio_encode: empty signal");
  const std::size_t win = config.window;
  const std::size_t bins = win / 2 + 1;
  const std::size_t tokens = (signal.size() + win - 1) / win;

  std::vector<double> cos_t(win), sin_t(win);
  for (std::size_t n = 0; n < win; ++n) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(win);
    cos_t[n] = std::cos(a);
    sin_t[n] = std::sin(a);
  }
  std::vector<std::size_t> band(bins);
  for (std::size_t m = 0; m < bins; ++m) band[m] = band_of_bin(m, config);

  std::vector<double> out(tokens * config.bands);
  std::vector<double> frame(win);
  std::vector<double> energy(config.bands);
  const double norm = 1.0 / (static_cast<double>(win) * static_cast<double>(win));
  for (std::size_t j = 0; j < tokens; ++j) {
    for (std::size_t n = 0; n < win; ++n) {
      const std::size_t i = j * win + n;
      frame[n] = i < signal.size() ? static_cast<double>(signal[i]) : 0.0;
    }
    std::fill(energy.begin(), energy.end(), 0.0);
    for (std::size_t m = 0; m < bins; ++m) {
      double re = 0.0, im = 0.0;
      std::size_t idx = 0;
      for (std::size_t n = 0; n < win; ++n) {
        re += frame[n] * cos_t[idx];
        im -= frame[n] * sin_t[idx];
        idx += m;
        if (idx >= win) idx -= win;
      }
      // One-sided power: interior bins stand for their negative-frequency twin.
      const bool edge = m == 0 || 2 * m == win;
      energy[band[m]] += (edge ? 1.0 : 2.0) * (re * re + im * im) * norm;
    }
    for (std::size_t b = 0; b < config.bands; ++b) {
      out[j * config.bands + b] = std::log(std::max(energy[b], kEnergyFloor));
    }
  }
  return {Tensor::from({tokens, config.bands}, std::move(out))};
}

}  // namespace

AudioLatent audio_encode(std::span<const double> signal, const CodecConfig& config) {
  return encode_impl(signal, config);
}

AudioLatent audio_encode(std::span<const float> signal, const CodecConfig& config) {
  return encode_impl(signal, config);
}

std::vector<double> audio_envelope(const AudioLatent& latent) {
  const Tensor& v = latent.values;
  if (v.rank() != 2) throw ShapeError("audio_envelope: expected [N_a, bands], got " + to_string(v.shape()));
  std::vector<double> env(v.dim(0), 0.0);
  for (std::size_t j = 0; j < v.dim(0); ++j) {
    for (std::size_t b = 0; b < v.dim(1); ++b) env[j] += std::exp(v[j * v.dim(1) + b]);
  }
  return env;
}

LatentMask mask_to_latent(const PixelMask& pixel_mask) {
  if (pixel_mask.height % 2 != 0 || pixel_mask.width % 2 != 0) {
    throw ShapeError("mask_to_latent: odd mask dimensions");
  }
  LatentMask out = LatentMask::empty(pixel_mask.frames, pixel_mask.height / 2, pixel_mask.width / 2);
  for (std::size_t f = 0; f < pixel_mask.frames; ++f) {
    for (std::size_t y = 0; y < pixel_mask.height; ++y) {
      for (std::size_t x = 0; x < pixel_mask.width; ++x) {
        if (pixel_mask.at(f, y, x)) out.set(f, y / 2, x / 2, true);
      }
    }
  }
  return out;
}

namespace {
Tensor affine(const Tensor& t, double mul, double add) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[i] * mul + add;
  return Tensor::from(t.shape(), std::move(out));
}
}  // namespace

Tensor LatentScaling::video_to_model(const Tensor& codec) const { return affine(codec, 2.0, -1.0); }
Tensor LatentScaling::video_from_model(const Tensor& model) const { return affine(model, 0.5, 0.5); }
Tensor LatentScaling::audio_to_model(const Tensor& codec) const {
  return affine(codec, 1.0 / audio_scale, -audio_shift / audio_scale);
}
Tensor LatentScaling::audio_from_model(const Tensor& model) const { return affine(model, audio_scale, audio_shift); }

}  // namespace avedit
