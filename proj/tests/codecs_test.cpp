#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "avedit/codecs.hpp"
#include "avedit/random.hpp"
#include "support.hpp"

namespace avedit {
namespace {

std::vector<double> tone(std::size_t n, double hz, double amp, const CodecConfig& cfg) {
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / static_cast<double>(cfg.sample_rate));
  }
  return s;
}

TEST(VideoCodec, ZeroVideo) {
  VideoLatent z = video_encode(Tensor::zeros({8, 16, 16}));
  EXPECT_EQ(z.values.shape(), (Shape{8, 8, 8, 4}));
  for (double v : z.values.data()) EXPECT_EQ(v, 0.0);
  Tensor back = video_decode(z);
  for (double v : back.data()) EXPECT_EQ(v, 0.0);
}

TEST(VideoCodec, RoundTripIsExact) {
  Rng rng(1);
  std::vector<double> px(8 * 16 * 16);
  for (auto& v : px) v = rng.uniform();
  Tensor video = Tensor::from({8, 16, 16}, px);
  Tensor back = video_decode(video_encode(video));
  EXPECT_EQ(max_abs_diff(back, video), 0.0);
  VideoLatent z{testing::random_tensor({3, 4, 5, 4}, rng)};
  EXPECT_EQ(max_abs_diff(video_encode(video_decode(z)).values, z.values), 0.0);
}

TEST(VideoCodec, WhiteFrameEncodesToOnes) {
  VideoLatent z = video_encode(Tensor::full({1, 16, 16}, 1.0));
  for (double v : z.values.data()) EXPECT_EQ(v, 1.0);
  Tensor back = video_decode(z);
  for (double v : back.data()) EXPECT_EQ(v, 1.0);
}

TEST(VideoCodec, PatchChannelOrder) {
  std::vector<double> px(4, 0.0);
  px[0] = 1;  // (0,0)
  px[1] = 2;  // (0,1)
  px[2] = 3;  // (1,0)
  px[3] = 4;  // (1,1)
  VideoLatent z = video_encode(Tensor::from({1, 2, 2}, px));
  EXPECT_EQ(std::vector<double>(z.values.data().begin(), z.values.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(VideoCodec, OddDimensionsRejected) {
  EXPECT_THROW(video_encode(Tensor::zeros({1, 3, 4})), ShapeError);
  EXPECT_THROW(video_decode(VideoLatent{Tensor::zeros({1, 2, 2, 3})}), ShapeError);
}

TEST(AudioCodec, SilenceHitsFloor) {
  CodecConfig cfg;
  AudioLatent a = audio_encode(std::vector<double>(8000, 0.0), cfg);
  EXPECT_EQ(a.values.shape(), (Shape{32, 8}));
  for (double v : a.values.data()) EXPECT_EQ(v, std::log(1e-8));
}

TEST(AudioCodec, TokenCountIsCeil) {
  CodecConfig cfg;
  EXPECT_EQ(audio_encode(std::vector<double>(1, 0.0), cfg).tokens(), 1u);
  EXPECT_EQ(audio_encode(std::vector<double>(250, 0.0), cfg).tokens(), 1u);
  EXPECT_EQ(audio_encode(std::vector<double>(251, 0.0), cfg).tokens(), 2u);
  EXPECT_THROW(audio_encode(std::vector<double>{}, cfg), std::invalid_argument);
}

TEST(AudioCodec, ToneBandDominatesEveryWindow) {
  CodecConfig cfg;
  for (std::size_t k = 0; k < cfg.bands; ++k) {
    AudioLatent a = audio_encode(tone(8000, band_center_hz(k, cfg), 1.0, cfg), cfg);
    for (std::size_t j = 0; j < a.tokens(); ++j) {
      for (std::size_t b = 0; b < cfg.bands; ++b) {
        if (b != k) EXPECT_GT(a.values[j * 8 + k], a.values[j * 8 + b]) << "band " << k << " token " << j;
      }
    }
  }
}

TEST(AudioCodec, FullScaleSineHasHalfPower) {
  CodecConfig cfg;
  // 1760 Hz sits exactly on DFT bin 55 of a 250-sample window.
  AudioLatent a = audio_encode(tone(250, 1760.0, 1.0, cfg), cfg);
  EXPECT_NEAR(std::exp(a.values[3]), 0.5, 1e-9);
}

TEST(AudioCodec, WindowsAreLocal) {
  CodecConfig cfg;
  std::vector<double> sig(2000, 0.0);
  auto beep = tone(1000, 1250.0, 1.0, cfg);
  std::copy(beep.begin(), beep.end(), sig.begin() + 1000);
  AudioLatent a = audio_encode(sig, cfg);
  AudioLatent silence = audio_encode(std::vector<double>(250, 0.0), cfg);
  for (std::size_t b = 0; b < 8; ++b) EXPECT_EQ(a.values[b], silence.values[b]);

  Rng rng(2);
  std::vector<double> noise(2000);
  for (auto& v : noise) v = rng.normal();
  std::vector<double> tail(noise.begin() + 750, noise.begin() + 1000);
  AudioLatent whole = audio_encode(noise, cfg), part = audio_encode(tail, cfg);
  for (std::size_t b = 0; b < 8; ++b) EXPECT_EQ(whole.values[3 * 8 + b], part.values[b]);
}

TEST(AudioCodec, FloatAndDoubleAgree) {
  CodecConfig cfg;
  auto d = tone(600, 700.0, 0.5, cfg);
  std::vector<float> f(d.begin(), d.end());
  std::vector<double> df(f.begin(), f.end());
  EXPECT_TRUE(bit_equal(audio_encode(f, cfg).values, audio_encode(df, cfg).values));
}

TEST(Envelope, SilenceLevel) {
  CodecConfig cfg;
  auto env = audio_envelope(audio_encode(std::vector<double>(8000, 0.0), cfg));
  for (double e : env) EXPECT_NEAR(e, 8e-8, 1e-20);
}

TEST(Envelope, QuadraticInAmplitude) {
  CodecConfig cfg;
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const double hz = 100.0 + rng.uniform() * 3800.0, amp = 0.05 + rng.uniform() * 0.5;
    auto e1 = audio_envelope(audio_encode(tone(2000, hz, amp, cfg), cfg));
    auto e2 = audio_envelope(audio_encode(tone(2000, hz, 2.0 * amp, cfg), cfg));
    // Bands below the 1e-8 floor do not scale, hence the relative tolerance.
    for (std::size_t j = 0; j < e1.size(); ++j) EXPECT_NEAR(e2[j] / e1[j], 4.0, 1e-4);
  }
}

TEST(Envelope, StepAtBeepWindow) {
  CodecConfig cfg;
  std::vector<double> sig(1000, 0.0);
  auto beep = tone(500, 1750.0, 1.0, cfg);
  std::copy(beep.begin(), beep.end(), sig.begin() + 500);
  auto env = audio_envelope(audio_encode(sig, cfg));
  EXPECT_LT(env[0], 1e-6);
  EXPECT_LT(env[1], 1e-6);
  EXPECT_GT(env[2], 0.1);
  EXPECT_GT(env[3], 0.1);
}

TEST(Bands, BinMappingAndCentres) {
  CodecConfig cfg;
  EXPECT_EQ(band_of_bin(0, cfg), 0u);
  EXPECT_EQ(band_of_bin(15, cfg), 0u);   // 480 Hz
  EXPECT_EQ(band_of_bin(16, cfg), 1u);   // 512 Hz
  EXPECT_EQ(band_of_bin(125, cfg), 7u);  // Nyquist
  EXPECT_DOUBLE_EQ(band_center_hz(0, cfg), 250.0);
  EXPECT_DOUBLE_EQ(band_center_hz(7, cfg), 3750.0);
}

TEST(Mask, EmptyAndFull) {
  PixelMask empty = PixelMask::empty(2, 4, 6);
  EXPECT_EQ(mask_to_latent(empty).count(), 0u);
  PixelMask full = empty;
  std::fill(full.flags.begin(), full.flags.end(), 1);
  LatentMask l = mask_to_latent(full);
  EXPECT_EQ(l.count(), 2u * 2u * 3u);
}

TEST(Mask, SinglePixel) {
  PixelMask m = PixelMask::empty(3, 16, 16);
  m.set(1, 5, 10, true);
  LatentMask l = mask_to_latent(m);
  EXPECT_EQ(l.count(), 1u);
  EXPECT_TRUE(l.at(1, 2, 5));
}

TEST(Mask, NeverUnmasks) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    PixelMask m = PixelMask::empty(2, 8, 8);
    for (auto& f : m.flags) f = rng.uniform() < 0.1;
    LatentMask l = mask_to_latent(m);
    for (std::size_t f = 0; f < 2; ++f)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
          if (m.at(f, y, x)) EXPECT_TRUE(l.at(f, y / 2, x / 2));
  }
}

TEST(Scaling, RoundTrip) {
  LatentScaling s;
  Rng rng(5);
  Tensor v = testing::random_tensor({2, 3}, rng);
  EXPECT_LT(max_abs_diff(s.video_from_model(s.video_to_model(v)), v), 1e-15);
  EXPECT_LT(max_abs_diff(s.audio_from_model(s.audio_to_model(v)), v), 1e-14);
  EXPECT_DOUBLE_EQ(s.video_to_model(Tensor::full({1}, 1.0))[0], 1.0);
  EXPECT_DOUBLE_EQ(s.audio_to_model(Tensor::full({1}, -10.0))[0], 0.0);
}

}  // namespace
}  // namespace avedit
