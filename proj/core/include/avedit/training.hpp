#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "avedit/graph.hpp"
#include "avedit/model.hpp"
#include "avedit/random.hpp"
#include "avedit/world.hpp"

namespace avedit {

enum class TrainMode { kJoint, kAudioDriven, kVideoDriven, kContextNull };
inline constexpr std::array<TrainMode, 4> kAllModes{TrainMode::kJoint, TrainMode::kAudioDriven,
                                                    TrainMode::kVideoDriven, TrainMode::kContextNull};

std::string_view mode_name(TrainMode mode);

struct ModeRouterConfig {
  double p_joint = 0.4;
  double p_audio_driven = 0.2;
  double p_video_driven = 0.2;
  double p_context_null = 0.2;
  double text_drop = 0.1;
  double base_drop = 0.1;

  void validate() const;
  std::array<double, 4> probabilities() const { return {p_joint, p_audio_driven, p_video_driven, p_context_null}; }
};

TrainMode sample_mode(Rng& rng, const ModeRouterConfig& router);

struct MaskAugmentConfig {
  std::size_t max_dilation = 20;  // pixels per side
  double bbox_probability = 0.3;
};

struct AugmentedMask {
  PixelMask mask;
  std::array<std::size_t, 4> dilation{};  // top, bottom, left, right
  bool bbox = false;
};

/// Dilates each side by an independent uniform amount in [0, max_dilation],
/// then with bbox_probability replaces every frame by its bounding box.
AugmentedMask augment_mask(const PixelMask& mask, Rng& rng, const MaskAugmentConfig& config = {});
PixelMask dilate(const PixelMask& mask, const std::array<std::size_t, 4>& sides);
PixelMask bounding_box(const PixelMask& mask);

struct TrainBatch {
  TrainMode mode = TrainMode::kJoint;
  StreamState state;
  ConditionBundle cond;
  Tensor video_target;  // v = eps - z0 for a noised stream, undefined for a clean one
  Tensor audio_target;
  bool text_dropped = false;
  bool base_dropped = false;
  AugmentedMask mask;
};

struct BatchOptions {
  std::size_t caption_length = 8;
  MaskAugmentConfig augment;
  double background = 0.0;
  std::optional<double> t;  // overrides the sampled timestep
};

/// z_t = (1 - t) z0 + t eps.
Tensor noise_path(const Tensor& z0, const Tensor& eps, double t);

TrainBatch make_batch(const EncodedScene& scene, TrainMode mode, Rng& rng, const ModeRouterConfig& router,
                      const BatchOptions& options = {});

/// Per-mode flow-matching loss; throws NumericalError when non-finite.
Tensor compute_loss(Graph& g, const Model& model, const TrainBatch& batch);

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
  bool cosine = true;

  void validate() const;
};

/// Adaptive moment estimation over a model's parameters.
class Adam {
 public:
  Adam(Model& model, OptimizerConfig config);
  /// Applies one update from the accumulated gradients at learning rate lr,
  /// then clears them. Returns the pre-clip global gradient norm.
  double step(double lr);
  std::size_t steps() const { return t_; }
  std::size_t clipped() const { return clipped_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  OptimizerConfig config_;
  std::size_t t_ = 0;
  std::size_t clipped_ = 0;
};

/// Learning rate at 0-based step under the configured schedule.
double scheduled_lr(const OptimizerConfig& config, std::size_t step, std::size_t total);

struct TrainConfig {
  ModelConfig model;
  ModeRouterConfig router;
  OptimizerConfig optimizer;
  MaskAugmentConfig augment{2, 0.3};
  WorldParams world;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossRecord {
  std::size_t step = 0;  // 1-based
  TrainMode mode = TrainMode::kJoint;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
};

struct TrainResult {
  std::vector<LossRecord> curve;
  std::size_t clipped_steps = 0;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Per step: draw a scene and a mode, build a batch, backpropagate, update.
/// Deterministic for a given seed. Throws NumericalError naming the step.
TrainResult train_loop(Model& model, const std::vector<EncodedScene>& scenes, const TrainConfig& config,
                       const StepCallback& on_step = {});

/// "step,mode,loss" CSV.
std::string loss_curve_csv(const std::vector<LossRecord>& curve);

/// Mean loss over 1-based steps [first, last].
double mean_loss(const std::vector<LossRecord>& curve, std::size_t first, std::size_t last);

}  // namespace avedit
