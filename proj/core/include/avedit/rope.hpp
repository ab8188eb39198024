#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "avedit/graph.hpp"
#include "avedit/tensor.hpp"

namespace avedit {

/// Token counts of the joint sequence. One reference frame always precedes
/// the condition and target segments.
struct SequenceLayout {
  std::size_t frames = 8;        // N_t
  std::size_t audio_tokens = 32;  // N_a
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t reference_frames = 1;

  void validate() const;
  std::size_t cells() const { return grid_h * grid_w; }
  std::size_t reference_tokens() const { return reference_frames * cells(); }
  std::size_t frame_tokens() const { return frames * cells(); }
  std::size_t video_tokens() const { return reference_tokens() + 2 * frame_tokens(); }
  std::size_t condition_offset() const { return reference_tokens(); }
  std::size_t target_offset() const { return reference_tokens() + frame_tokens(); }
  /// Frames per audio token, N_t / N_a.
  double audio_stride() const { return static_cast<double>(frames) / static_cast<double>(audio_tokens); }
  bool operator==(const SequenceLayout&) const = default;
};

enum class Segment { kReference, kCondition, kTarget, kAudio };

struct TokenPosition {
  double temporal = 0.0;
  int height = 0;
  int width = 0;
  Segment segment = Segment::kReference;
};

/// Positions for every token of the joint sequence, ordered as
/// [reference | condition | target | audio]; video tokens are frame-major,
/// then row-major over the latent grid.
struct PositionTable {
  SequenceLayout layout;
  std::vector<TokenPosition> tokens;

  std::span<const TokenPosition> video() const { return {tokens.data(), layout.video_tokens()}; }
  std::span<const TokenPosition> reference() const { return {tokens.data(), layout.reference_tokens()}; }
  std::span<const TokenPosition> condition() const {
    return {tokens.data() + layout.condition_offset(), layout.frame_tokens()};
  }
  std::span<const TokenPosition> target() const {
    return {tokens.data() + layout.target_offset(), layout.frame_tokens()};
  }
  std::span<const TokenPosition> audio() const {
    return {tokens.data() + layout.video_tokens(), layout.audio_tokens};
  }
};

enum class PositionScheme {
  kAligned,  // reference 0, condition/target share i, audio j * N_t / N_a
  kNaive,    // sequential: target F + i, audio j
};

/// Frame index i and audio index j are 1-based; the reference is pinned to 0.
PositionTable assign_positions(const SequenceLayout& layout, PositionScheme scheme = PositionScheme::kAligned);

/// How the pairs of one head are divided between the temporal, height and
/// width axes. Spatial axes get floor(pairs / 3) each and time takes the rest,
/// so the split is equal whenever head_dim is divisible by 6.
struct RotarySplit {
  std::size_t temporal = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pairs() const { return temporal + height + width; }
};

/// Throws ShapeError unless head_dim is even and provides one pair per axis.
RotarySplit rotary_split(std::size_t head_dim);

/// Angle tables for a run of tokens. Each axis uses frequencies
/// base^(-2k / d_axis); audio tokens carry height = width = 0, which leaves
/// their spatial pairs unrotated.
RotaryAngles rotary_angles(std::span<const TokenPosition> tokens, std::size_t head_dim, double base = 10000.0);

/// Out-of-graph rotary application to x[tokens, heads, head_dim].
Tensor apply_rotary(const Tensor& x, std::span<const TokenPosition> tokens, double base = 10000.0);

}  // namespace avedit
