#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "avedit/metrics.hpp"
#include "avedit/sampler.hpp"
#include "avedit/world.hpp"

namespace avedit {

inline constexpr int kSyncMaxLag = 3;  // frames

/// Decoded sample plus everything the metrics were computed from.
struct SampleEvaluation {
  Tensor pixels;  // [F, H, W]
  AudioLatent audio;
  std::vector<double> visual_events;  // blink frames inside the scene mask
  std::vector<double> audio_events;   // onset frames
  IntervalSet generated;
  MetricsReport report;
};

/// Conditioning that asks the model to regenerate the scene's target:
/// unaugmented mask, original captions, base audio present.
ConditionBundle scene_condition(const EncodedScene& scene, const ModelConfig& config, const WorldParams& params,
                                const LatentScaling& scaling = {});

/// Decodes model-space latents and scores them against the scene's ground
/// truth. When `instructed_band` is set, band dominance is measured for it.
SampleEvaluation evaluate_sample(const Scene& scene, const Tensor& video, const Tensor& audio,
                                 const WorldParams& params, std::optional<std::size_t> instructed_band = {},
                                 const LatentScaling& scaling = {});

/// A band different from the scene's own, drawn from `seed`.
std::size_t edit_band(const Scene& scene, std::uint64_t seed, std::size_t bands = 8);

}  // namespace avedit
