#include "avedit/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace avedit {

std::string_view mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::kJoint:
      return "joint";
    case TrainMode::kAudioDriven:
      return "audio_driven";
    case TrainMode::kVideoDriven:
      return "video_driven";
    case TrainMode::kContextNull:
      return "context_null";
  }
  return "unknown";
}

void ModeRouterConfig::validate() const {
  double sum = 0.0;
  for (double p : probabilities()) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("ModeRouterConfig: probabilities must lie in [0, 1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("ModeRouterConfig: probabilities must sum to 1");
  if (text_drop < 0.0 || text_drop > 1.0 || base_drop < 0.0 || base_drop > 1.0) {
    throw std::invalid_argument("ModeRouterConfig: drop rates must lie in [0, 1]");
  }
}

TrainMode sample_mode(Rng& rng, const ModeRouterConfig& router) {
  const auto p = router.probabilities();
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return kAllModes[i];
  }
  // u landed in the rounding gap above the cumulative sum: last mode with mass.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return kAllModes[i];
  }
  return TrainMode::kJoint;
}

// ---------------------------------------------------------------------------
// Mask augmentation

PixelMask dilate(const PixelMask& mask, const std::array<std::size_t, 4>& sides) {
  const auto [top, bottom, left, right] = sides;
  PixelMask out = PixelMask::empty(mask.frames, mask.height, mask.width);
  for (std::size_t f = 0; f < mask.frames; ++f) {
    for (std::size_t y = 0; y < mask.height; ++y) {
      for (std::size_t x = 0; x < mask.width; ++x) {
        if (!mask.at(f, y, x)) continue;
        // A set pixel grows `top` rows upwards, `bottom` rows downwards, etc.
        const std::size_t y0 = y >= top ? y - top : 0, y1 = std::min(mask.height - 1, y + bottom);
        const std::size_t x0 = x >= left ? x - left : 0, x1 = std::min(mask.width - 1, x + right);
        for (std::size_t yy = y0; yy <= y1; ++yy) {
          for (std::size_t xx = x0; xx <= x1; ++xx) out.set(f, yy, xx, true);
        }
      }
    }
  }
  return out;
}

PixelMask bounding_box(const PixelMask& mask) {
  PixelMask out = PixelMask::empty(mask.frames, mask.height, mask.width);
  for (std::size_t f = 0; f < mask.frames; ++f) {
    std::size_t y0 = mask.height, y1 = 0, x0 = mask.width, x1 = 0;
    for (std::size_t y = 0; y < mask.height; ++y) {
      for (std::size_t x = 0; x < mask.width; ++x) {
        if (!mask.at(f, y, x)) continue;
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
    }
    if (y0 > y1) continue;
    for (std::size_t y = y0; y <= y1; ++y) {
      for (std::size_t x = x0; x <= x1; ++x) out.set(f, y, x, true);
    }
  }
  return out;
}

AugmentedMask augment_mask(const PixelMask& mask, Rng& rng, const MaskAugmentConfig& config) {
  AugmentedMask r;
  for (auto& d : r.dilation) d = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(config.max_dilation)));
  r.bbox = rng.uniform() < config.bbox_probability;
  r.mask = dilate(mask, r.dilation);
  if (r.bbox) r.mask = bounding_box(r.mask);
  return r;
}

// ---------------------------------------------------------------------------
// Batches and loss

Tensor noise_path(const Tensor& z0, const Tensor& eps, double t) {
  if (z0.shape() != eps.shape()) throw ShapeError("noise_path: " + to_string(z0.shape()) + " vs " + to_string(eps.shape()));
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * z0[i] + t * eps[i];
  return Tensor::from(z0.shape(), std::move(out));
}

namespace {

Tensor velocity(const Tensor& z0, const Tensor& eps) {
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps[i] - z0[i];
  return Tensor::from(z0.shape(), std::move(out));
}

}  // namespace

TrainBatch make_batch(const EncodedScene& scene, TrainMode mode, Rng& rng, const ModeRouterConfig& router,
                      const BatchOptions& options) {
  TrainBatch b;
  b.mode = mode;
  const double t = options.t ? *options.t : rng.uniform();
  const Tensor eps_v = Tensor::from(scene.video.shape(), rng.normals(scene.video.size()));
  const Tensor eps_a = Tensor::from(scene.target_audio.shape(), rng.normals(scene.target_audio.size()));
  b.text_dropped = rng.uniform() < router.text_drop;
  const bool base_draw = rng.uniform() < router.base_drop;
  b.base_dropped = mode == TrainMode::kContextNull || base_draw;
  b.mask = augment_mask(scene.mask, rng, options.augment);

  const bool video_clean = mode == TrainMode::kVideoDriven;
  const bool audio_clean = mode == TrainMode::kAudioDriven;
  b.state.video = video_clean ? scene.video : noise_path(scene.video, eps_v, t);
  b.state.t_video = video_clean ? 0.0 : t;
  b.state.audio = audio_clean ? scene.target_audio : noise_path(scene.target_audio, eps_a, t);
  b.state.t_audio = audio_clean ? 0.0 : t;
  if (!video_clean) b.video_target = velocity(scene.video, eps_v);
  if (!audio_clean) b.audio_target = velocity(scene.target_audio, eps_a);

  b.cond = make_condition(scene, b.mask.mask, options.caption_length, options.background);
  if (b.text_dropped) {
    for (auto* c : {&b.cond.visual_caption, &b.cond.audio_caption, &b.cond.speech_caption}) {
      std::fill(c->begin(), c->end(), kNullToken);
    }
  }
  if (b.base_dropped) b.cond.base_audio.reset();
  return b;
}

Tensor compute_loss(Graph& g, const Model& model, const TrainBatch& batch) {
  ForwardFlags flags;
  flags.skip_context = batch.mode == TrainMode::kContextNull;
  const Prediction p = forward(g, model, batch.state, batch.cond, flags);
  Tensor loss;
  switch (batch.mode) {
    case TrainMode::kJoint:
    case TrainMode::kContextNull:
      loss = g.add(g.mean_square(p.video, batch.video_target), g.mean_square(p.audio, batch.audio_target));
      break;
    case TrainMode::kAudioDriven:
      loss = g.mean_square(p.video, batch.video_target);
      break;
    case TrainMode::kVideoDriven:
      loss = g.mean_square(p.audio, batch.audio_target);
      break;
  }
  if (!std::isfinite(loss.item())) {
    std::ostringstream msg;
    msg << "non-finite loss (mode " << mode_name(batch.mode) << ", t_video " << batch.state.t_video << ", t_audio "
        << batch.state.t_audio << ")";
    throw NumericalError(msg.str());
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizer

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("OptimizerConfig: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("OptimizerConfig: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0) || weight_decay < 0.0) throw std::invalid_argument("OptimizerConfig: eps > 0, weight_decay >= 0");
}

Adam::Adam(Model& model, OptimizerConfig config) : config_(config) {
  config_.validate();
  model.for_each_parameter([&](const std::string&, Tensor& t) {
    params_.push_back(t);
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  });
}

double Adam::step(double lr) {
  double sq = 0.0;
  for (auto& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.mutable_grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  double factor = 1.0;
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) {
    factor = config_.clip_norm / norm;
    ++clipped_;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    std::span<double> grad = has ? p.mutable_grad() : std::span<double>{};
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = (has ? grad[i] * factor : 0.0) + config_.weight_decay * w[i];
      m_[k][i] = config_.beta1 * m_[k][i] + (1.0 - config_.beta1) * g;
      v_[k][i] = config_.beta2 * v_[k][i] + (1.0 - config_.beta2) * g * g;
      w[i] -= lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + config_.eps);
    }
    p.zero_grad();
  }
  return norm;
}

double scheduled_lr(const OptimizerConfig& config, std::size_t step, std::size_t total) {
  if (!config.cosine || total == 0) return config.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Loop

void TrainConfig::validate() const {
  model.validate();
  router.validate();
  optimizer.validate();
  world.validate();
  const SequenceLayout l = layout_for(world.codec);
  if (l.frames != model.layout.frames || l.audio_tokens != model.layout.audio_tokens ||
      l.grid_h != model.layout.grid_h || l.grid_w != model.layout.grid_w) {
    throw std::invalid_argument("TrainConfig: model layout does not match the world codec");
  }
  if (model.audio_channels != world.codec.bands) {
    throw std::invalid_argument("TrainConfig: audio_channels must equal the codec band count");
  }
  if (model.vocab < vocab::kSize) throw std::invalid_argument("TrainConfig: vocab too small for the world captions");
}

TrainResult train_loop(Model& model, const std::vector<EncodedScene>& scenes, const TrainConfig& config,
                       const StepCallback& on_step) {
  config.validate();
  if (scenes.empty()) throw std::invalid_argument("train_loop: empty dataset");
  if (!(model.config == config.model)) throw std::invalid_argument("train_loop: model config differs from TrainConfig");
  Rng rng(config.seed);
  Adam adam(model, config.optimizer);
  BatchOptions options;
  options.caption_length = config.model.caption_length;
  options.augment = config.augment;
  options.background = config.world.background;

  TrainResult r;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto& scene = scenes[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(scenes.size()) - 1))];
    const TrainMode mode = sample_mode(rng, config.router);
    const TrainBatch batch = make_batch(scene, mode, rng, config.router, options);
    Graph g;
    Tensor loss;
    try {
      loss = compute_loss(g, model, batch);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(step + 1) + ": " + e.what());
    }
    g.backward(loss);
    const std::size_t clipped_before = adam.clipped();
    const double norm = adam.step(scheduled_lr(config.optimizer, step, config.steps));
    r.curve.push_back({step + 1, mode, loss.item(), norm, adam.clipped() > clipped_before});
    if (on_step) on_step(r.curve.back());
  }
  r.clipped_steps = adam.clipped();
  return r;
}

std::string loss_curve_csv(const std::vector<LossRecord>& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "step,mode,loss\n";
  for (const auto& rec : curve) out << rec.step << ',' << mode_name(rec.mode) << ',' << rec.loss << '\n';
  return out.str();
}

double mean_loss(const std::vector<LossRecord>& curve, std::size_t first, std::size_t last) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& rec : curve) {
    if (rec.step < first || rec.step > last) continue;
    sum += rec.loss;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("mean_loss: no records in range");
  return sum / static_cast<double>(n);
}

}  // namespace avedit
