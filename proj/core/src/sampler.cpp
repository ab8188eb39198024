#include "avedit/sampler.hpp"

#include <future>
#include <stdexcept>
#include <string>

#include "avedit/random.hpp"

namespace avedit {

void GuidanceConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("GuidanceConfig: steps must be positive");
  if (tau > steps) throw std::invalid_argument("GuidanceConfig: tau must lie in [0, steps]");
  if (s_ctx < 0.0 || s_v < 0.0 || s_a < 0.0) throw std::invalid_argument("GuidanceConfig: scales must be >= 0");
}

Anchors make_anchors(const CodecConfig& codec, const LatentScaling& scaling) {
  codec.validate();
  Anchors a;
  a.muted = audio_encode(std::vector<double>(codec.samples(), 0.0), codec);
  a.static_video = video_encode(Tensor::full({codec.frames, codec.height, codec.width}, 1.0));
  a.muted_model = scaling.audio_to_model(a.muted.values);
  a.static_model = scaling.video_to_model(a.static_video.values);
  return a;
}

PredictFn model_predictor(const Model& model) {
  return [&model](const StreamState& s, const ConditionBundle& c, ForwardFlags f) { return predict(model, s, c, f); };
}

Tensor guidance_combine(const Tensor& base, const Tensor& full, double s) {
  if (base.shape() != full.shape()) {
    throw ShapeError("guidance_combine: " + to_string(base.shape()) + " vs " + to_string(full.shape()));
  }
  if (s == 1.0) return full;
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = base[i] + s * (full[i] - base[i]);
  return Tensor::from(base.shape(), std::move(out));
}

namespace {

struct Branch {
  StreamState state;
  const ConditionBundle* cond;
  ForwardFlags flags;
};

std::vector<Prediction> run_branches(const PredictFn& predict, const std::vector<Branch>& branches,
                                     std::size_t threads) {
  std::vector<Prediction> out(branches.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < branches.size(); ++i) {
      out[i] = predict(branches[i].state, *branches[i].cond, branches[i].flags);
    }
    return out;
  }
  std::vector<std::future<Prediction>> jobs;
  for (std::size_t i = 1; i < branches.size(); ++i) {
    jobs.push_back(std::async(std::launch::async, [&predict, &b = branches[i]] { return predict(b.state, *b.cond, b.flags); }));
  }
  out[0] = predict(branches[0].state, *branches[0].cond, branches[0].flags);
  for (std::size_t i = 1; i < branches.size(); ++i) out[i] = jobs[i - 1].get();
  return out;
}

}  // namespace

Prediction guide_stage1(const PredictFn& predict, const StreamState& state, const ConditionBundle& cond, double s_ctx,
                        std::size_t* passes, std::size_t threads) {
  ConditionBundle null_ctx = cond;
  null_ctx.base_audio.reset();
  const auto p = run_branches(predict, {{state, &cond, {}}, {state, &null_ctx, {.skip_context = true}}}, threads);
  if (passes) *passes += 2;
  return {guidance_combine(p[1].video, p[0].video, s_ctx), guidance_combine(p[1].audio, p[0].audio, s_ctx)};
}

Prediction guide_stage2(const PredictFn& predict, const StreamState& state, const ConditionBundle& cond,
                        const Anchors& anchors, double s_v, double s_a, std::size_t* passes, std::size_t threads) {
  StreamState audio_anchored = state;
  audio_anchored.audio = anchors.muted_model;
  audio_anchored.t_audio = 0.0;
  StreamState video_anchored = state;
  video_anchored.video = anchors.static_model;
  video_anchored.t_video = 0.0;
  const auto p = run_branches(predict, {{state, &cond, {}}, {audio_anchored, &cond, {}}, {video_anchored, &cond, {}}},
                              threads);
  if (passes) *passes += 3;
  return {guidance_combine(p[1].video, p[0].video, s_v), guidance_combine(p[2].audio, p[0].audio, s_a)};
}

namespace {

void euler_step(Tensor& z, const Tensor& v, double dt, std::size_t step, const char* stream) {
  if (v.shape() != z.shape()) {
    throw ShapeError(std::string("sample: ") + stream + " prediction " + to_string(v.shape()) + " vs state " +
                     to_string(z.shape()));
  }
  std::vector<double> next(z.size());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] = z[i] - dt * v[i];
  if (!all_finite(next)) {
    throw NumericalError(std::string("sample: non-finite ") + stream + " latent at step " + std::to_string(step));
  }
  z = Tensor::from(z.shape(), std::move(next));
}

}  // namespace

SampleResult sample(const PredictFn& predict, const ConditionBundle& cond, const GuidanceConfig& config,
                    const Anchors& anchors, const Shape& video_shape, const Shape& audio_shape, std::uint64_t seed,
                    std::size_t threads) {
  config.validate();
  Rng rng(seed);
  SampleResult r;
  r.video = Tensor::from(video_shape, rng.normals(numel(video_shape)));
  r.audio = Tensor::from(audio_shape, rng.normals(numel(audio_shape)));
  const double dt = 1.0 / static_cast<double>(config.steps);
  for (std::size_t i = 1; i <= config.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i - 1) * dt;
    const StreamState state{r.video, r.audio, t, t};
    std::size_t passes = 0;
    Prediction v;
    int stage = 0;
    if (config.joint_only) {
      v = predict(state, cond, {});
      passes = 1;
    } else if (i <= config.tau) {
      v = guide_stage1(predict, state, cond, config.s_ctx, &passes, threads);
      stage = 1;
    } else {
      v = guide_stage2(predict, state, cond, anchors, config.s_v, config.s_a, &passes, threads);
      stage = 2;
    }
    euler_step(r.video, v.video, dt, i, "video");
    euler_step(r.audio, v.audio, dt, i, "audio");
    r.accounting.per_step.push_back(passes);
    r.accounting.stage.push_back(stage);
    r.accounting.total += passes;
  }
  return r;
}

SampleResult sample(const Model& model, const ConditionBundle& cond, const GuidanceConfig& config,
                    const Anchors& anchors, std::uint64_t seed, std::size_t threads) {
  const auto& l = model.config.layout;
  return sample(model_predictor(model), cond, config, anchors, {l.frames, l.grid_h, l.grid_w, kVideoChannels},
                {l.audio_tokens, model.config.audio_channels}, seed, threads);
}

}  // namespace avedit
