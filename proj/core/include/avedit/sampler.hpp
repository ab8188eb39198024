#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "avedit/codecs.hpp"
#include "avedit/model.hpp"

namespace avedit {

struct GuidanceConfig {
  std::size_t steps = 50;
  std::size_t tau = 10;  // last stage-1 step
  double s_ctx = 5.0;
  double s_v = 5.0;
  double s_a = 5.0;
  /// One joint forward per step, no guidance (baseline sampler).
  bool joint_only = false;

  void validate() const;
};

/// Negative anchors: muted audio and a static white video, both as codec
/// latents and in model space.
struct Anchors {
  AudioLatent muted;
  VideoLatent static_video;
  Tensor muted_model;
  Tensor static_model;
};

Anchors make_anchors(const CodecConfig& codec, const LatentScaling& scaling = {});

struct PassAccounting {
  std::vector<std::size_t> per_step;
  std::vector<int> stage;  // 1 or 2 per step, 0 for joint-only steps
  std::size_t total = 0;
};

/// Model evaluation used by the sampler; injectable for testing.
using PredictFn = std::function<Prediction(const StreamState&, const ConditionBundle&, ForwardFlags)>;
PredictFn model_predictor(const Model& model);

/// base + s * (full - base), elementwise. Exact at s = 0, at s = 1 and
/// wherever full == base.
Tensor guidance_combine(const Tensor& base, const Tensor& full, double s);

/// Context CFG over the joint and context-null branches (2 forwards).
Prediction guide_stage1(const PredictFn& predict, const StreamState& state, const ConditionBundle& cond, double s_ctx,
                        std::size_t* passes = nullptr, std::size_t threads = 1);
/// Synchronization CFG against the anchored branches (3 forwards).
Prediction guide_stage2(const PredictFn& predict, const StreamState& state, const ConditionBundle& cond,
                        const Anchors& anchors, double s_v, double s_a, std::size_t* passes = nullptr,
                        std::size_t threads = 1);

struct SampleResult {
  Tensor video;  // model space
  Tensor audio;
  PassAccounting accounting;
};

/// Euler integration from t = 1 to 0 in `steps` equal steps. Initial latents
/// are N(0, 1) from `seed`. Throws NumericalError on non-finite latents.
SampleResult sample(const PredictFn& predict, const ConditionBundle& cond, const GuidanceConfig& config,
                    const Anchors& anchors, const Shape& video_shape, const Shape& audio_shape, std::uint64_t seed,
                    std::size_t threads = 1);
SampleResult sample(const Model& model, const ConditionBundle& cond, const GuidanceConfig& config,
                    const Anchors& anchors, std::uint64_t seed, std::size_t threads = 1);

}  // namespace avedit
