#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "avedit/codecs.hpp"
#include "avedit/graph.hpp"
#include "avedit/rope.hpp"
#include "avedit/tensor.hpp"

namespace avedit {

inline constexpr std::size_t kNullToken = 0;

struct ModelConfig {
  std::size_t blocks = 2;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t vocab = 64;
  std::size_t caption_length = 8;
  std::size_t mlp_ratio = 4;
  std::size_t video_channels = kVideoChannels;
  std::size_t audio_channels = 8;
  // Cross-modal temporal grouping, in frame units: a key is admissible when
  // |p_key - p_query| <= group_size * window / 2.
  double a2v_group_size = 1.25;
  std::size_t a2v_window = 3;
  double v2a_group_size = 0.8;
  std::size_t v2a_window = 1;
  std::size_t acoustic_window = 8;  // +- window/2 audio tokens
  double rope_base = 10000.0;
  PositionScheme positions = PositionScheme::kAligned;
  SequenceLayout layout;

  void validate() const;
  std::size_t head_dim() const { return hidden / heads; }
  double a2v_half_width() const { return a2v_group_size * static_cast<double>(a2v_window) / 2.0; }
  double v2a_half_width() const { return v2a_group_size * static_cast<double>(v2a_window) / 2.0; }
  bool operator==(const ModelConfig&) const = default;
};

/// Layout derived from the codec geometry (grid, frame and token counts).
SequenceLayout layout_for(const CodecConfig& codec);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], undefined for bias-free projections
};

struct AttentionParams {
  Linear q, k, v, o;
};

/// adaLN: shift/scale/gate vectors regressed from the stream conditioning.
struct Modulation {
  Linear shift, scale, gate;
};

struct VideoBlock {
  enum Sublayer { kSelf, kText, kA2V, kMlp, kCount };
  AttentionParams self_attn, text_attn, a2v;
  Linear mlp_in, mlp_out;
  std::array<Modulation, kCount> mod;
};

struct AudioBlock {
  enum Sublayer { kSelf, kText, kV2A, kVisualContext, kAcousticContext, kMlp, kCount };
  AttentionParams self_attn, text_attn, v2a, visual_context, acoustic_context;
  Linear mlp_in, mlp_out;
  std::array<Modulation, kCount> mod;
};

struct TimeEmbedder {
  Linear fc1, fc2;
};

struct OutputHead {
  Linear shift, scale, proj;
};

/// Cached, parameter-independent tables derived from the layout.
struct PositionPlan {
  PositionTable table;
  RotaryAngles video;      // all video tokens
  RotaryAngles target;     // target segment only
  RotaryAngles condition;  // condition segment only
  RotaryAngles audio;
  AttentionMask v2a;       // [N_a, target tokens]
  AttentionMask acoustic;  // [N_a, N_a]
};

class Model {
 public:
  ModelConfig config;
  std::uint64_t seed = 0;

  Linear embed_target, embed_condition, embed_reference;  // video patch embeddings
  Tensor mask_embed;                                      // [D], added to tokens inside M
  Linear embed_audio;
  Tensor text_table;  // [vocab, D], shared by both streams
  TimeEmbedder video_time, audio_time;
  std::vector<VideoBlock> video_blocks;
  std::vector<AudioBlock> audio_blocks;
  OutputHead video_head, audio_head;

  std::shared_ptr<const PositionPlan> plan;

  /// Visits every parameter in a fixed order with a stable dotted name.
  /// Video-stream names start with "video.", audio-stream names with "audio.".
  void for_each_parameter(const std::function<void(const std::string&, Tensor&)>& fn);
  std::vector<std::pair<std::string, Tensor>> parameters();
  std::size_t parameter_count();
  /// Deep copy with independent parameter storage.
  Model clone() const;
};

/// normal(0, 0.02) weights, zero biases; both context output projections
/// exactly zero; condition embedding copied from the target embedding.
/// Key projections are bias-free everywhere; context-attention V and output
/// projections are bias-free too.
Model init_model(const ModelConfig& config, std::uint64_t seed);
std::shared_ptr<const PositionPlan> make_plan(const ModelConfig& config);

/// Everything the network is conditioned on, in model space.
struct ConditionBundle {
  std::vector<std::size_t> visual_caption;  // padded with kNullToken
  std::vector<std::size_t> audio_caption;
  std::vector<std::size_t> speech_caption;
  std::optional<Tensor> base_audio;  // b: [N_a, C_a]
  Tensor reference;                  // [1, H_l, W_l, C_v]
  Tensor masked_video;               // z_cond: [N_t, H_l, W_l, C_v]
  LatentMask mask;                   // M: [N_t, H_l, W_l]
};

struct StreamState {
  Tensor video;  // z_{v,t}: [N_t, H_l, W_l, C_v]
  Tensor audio;  // z_{a,t}: [N_a, C_a]
  double t_video = 1.0;
  double t_audio = 1.0;
};

struct Prediction {
  Tensor video;
  Tensor audio;
};

struct ForwardFlags {
  /// Skips both context layers and treats b as absent (context-null branch).
  bool skip_context = false;
};

Prediction forward(Graph& g, const Model& model, const StreamState& state, const ConditionBundle& cond,
                   ForwardFlags flags = {});
/// Inference-mode forward.
Prediction predict(const Model& model, const StreamState& state, const ConditionBundle& cond,
                   ForwardFlags flags = {});

// --- Cross-modal and context layers, exposed for direct testing. -----------

/// Indices (within the target segment) of tokens whose latent cell is in M.
std::vector<std::size_t> masked_target_rows(const LatentMask& mask, const SequenceLayout& layout);

/// [queries, N_a] admissibility of audio keys for the given target rows.
AttentionMask a2v_mask(const PositionTable& table, std::span<const std::size_t> target_rows, double half_width);
/// [N_a, target tokens] admissibility of target-video keys for audio queries.
AttentionMask v2a_mask(const PositionTable& table, double half_width);
/// [N_a, N_a] band |j - j'| <= window / 2.
AttentionMask acoustic_window_mask(std::size_t tokens, std::size_t window);

/// Audio -> video update for the whole target segment [target tokens, D];
/// rows outside M are exactly zero. video/audio are normalized hidden states.
Tensor cross_modal_a2v(Graph& g, const Model& model, const AttentionParams& p, const Tensor& video_target,
                       const Tensor& audio, const LatentMask& mask);
/// Video -> audio update [N_a, D]. Video keys/values are detached.
Tensor cross_modal_v2a(Graph& g, const Model& model, const AttentionParams& p, const Tensor& audio,
                       const Tensor& video_target);
/// Audio queries over the raw masked-video latent (unwindowed).
Tensor visual_context_attn(Graph& g, const Model& model, const AttentionParams& p, const Tensor& audio,
                           const Tensor& masked_video);
/// Audio queries over the raw base-audio latent within the acoustic window.
Tensor acoustic_context_attn(Graph& g, const Model& model, const AttentionParams& p, const Tensor& audio,
                             const Tensor& base_audio);

/// Sinusoidal embedding of t in [0, 1] (scaled by 1000), width `dim`.
Tensor timestep_embedding(std::span<const double> ts, std::size_t dim);

/// Null-padded caption of the configured length; throws if too long.
std::vector<std::size_t> pad_caption(std::vector<std::size_t> tokens, std::size_t length);

}  // namespace avedit
