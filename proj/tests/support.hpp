#pragma once

#include <cmath>
#include <vector>

#include "avedit/model.hpp"
#include "avedit/random.hpp"

namespace avedit::testing {

inline ModelConfig micro_config(std::size_t blocks = 1) {
  ModelConfig cfg;
  cfg.blocks = blocks;
  cfg.hidden = 12;
  cfg.heads = 2;
  cfg.vocab = 16;
  cfg.caption_length = 4;
  cfg.mlp_ratio = 2;
  cfg.layout.frames = 2;
  cfg.layout.audio_tokens = 4;
  cfg.layout.grid_h = 2;
  cfg.layout.grid_w = 2;
  return cfg;
}

/// Model whose every parameter (including the zero-initialized context
/// projections) is drawn from normal(0, stddev).
inline Model random_model(const ModelConfig& cfg, std::uint64_t seed, double stddev = 0.3) {
  Model m = init_model(cfg, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  m.for_each_parameter([&](const std::string&, Tensor& t) {
    for (auto& v : t.mutable_data()) v = stddev * rng.normal();
  });
  return m;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(shape, std::move(v));
}

/// Mask with roughly half the latent cells set, at least one in and one out.
inline LatentMask random_mask(const SequenceLayout& l, Rng& rng) {
  LatentMask m = LatentMask::empty(l.frames, l.grid_h, l.grid_w);
  for (auto& f : m.flags) f = rng.uniform() < 0.5;
  m.flags.front() = 1;
  m.flags.back() = 0;
  return m;
}

inline ConditionBundle random_bundle(const ModelConfig& cfg, Rng& rng, bool with_base = true) {
  const auto& l = cfg.layout;
  ConditionBundle c;
  auto caption = [&](std::size_t used) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < used; ++i) ids.push_back(1 + static_cast<std::size_t>(rng.integer(0, cfg.vocab - 2)));
    return pad_caption(ids, cfg.caption_length);
  };
  c.visual_caption = caption(2);
  c.audio_caption = caption(2);
  c.speech_caption = pad_caption({}, cfg.caption_length);
  if (with_base) c.base_audio = random_tensor({l.audio_tokens, cfg.audio_channels}, rng);
  c.reference = random_tensor({1, l.grid_h, l.grid_w, cfg.video_channels}, rng);
  c.masked_video = random_tensor({l.frames, l.grid_h, l.grid_w, cfg.video_channels}, rng);
  c.mask = random_mask(l, rng);
  return c;
}

inline StreamState random_state(const ModelConfig& cfg, Rng& rng, double t_video = 0.6, double t_audio = 0.6) {
  const auto& l = cfg.layout;
  return {random_tensor({l.frames, l.grid_h, l.grid_w, cfg.video_channels}, rng),
          random_tensor({l.audio_tokens, cfg.audio_channels}, rng), t_video, t_audio};
}

}  // namespace avedit::testing
