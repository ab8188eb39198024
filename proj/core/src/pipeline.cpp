#include "avedit/pipeline.hpp"

#include "avedit/random.hpp"

namespace avedit {

ConditionBundle scene_condition(const EncodedScene& scene, const ModelConfig& config, const WorldParams& params,
                                const LatentScaling& scaling) {
  return make_condition(scene, scene.mask, config.caption_length, params.background, scaling);
}

SampleEvaluation evaluate_sample(const Scene& scene, const Tensor& video, const Tensor& audio,
                                 const WorldParams& params, std::optional<std::size_t> instructed_band,
                                 const LatentScaling& scaling) {
  const auto& codec = params.codec;
  SampleEvaluation e;
  e.pixels = video_decode(VideoLatent{scaling.video_from_model(video)});
  e.audio = AudioLatent{scaling.audio_from_model(audio)};
  e.visual_events = detect_blinks(e.pixels, scene.mask);
  e.audio_events = onset_frames(e.audio, codec);
  e.generated = active_intervals(e.audio, codec.window_seconds());

  auto& r = e.report;
  r.ctx = ctx_f1(e.generated, IntervalSet(scene.protected_intervals), IntervalSet(scene.target_intervals));
  r.sync_defined = !e.visual_events.empty() && !e.audio_events.empty();
  r.sync = sync_lag(e.visual_events, e.audio_events, kSyncMaxLag);
  if (instructed_band) {
    r.instructed_band = instructed_band;
    r.band = band_dominance(e.audio, *instructed_band);
  }
  return e;
}

std::size_t edit_band(const Scene& scene, std::uint64_t seed, std::size_t bands) {
  Rng rng(seed);
  auto k = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(bands) - 2));
  if (k >= scene.band) ++k;
  return k;
}

}  // namespace avedit
