#include "avedit/rope.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace avedit {

void SequenceLayout::validate() const {
  if (frames < 1 || audio_tokens < 1 || grid_h < 1 || grid_w < 1 || reference_frames != 1) {
    throw std::invalid_argument("SequenceLayout: need N_t >= 1, N_a >= 1, a non-empty grid and one reference frame");
  }
}

PositionTable assign_positions(const SequenceLayout& layout, PositionScheme scheme) {
  layout.validate();
  PositionTable table;
  table.layout = layout;
  table.tokens.reserve(layout.video_tokens() + layout.audio_tokens);

  auto push_frame = [&](double t, Segment seg) {
    for (std::size_t h = 0; h < layout.grid_h; ++h) {
      for (std::size_t w = 0; w < layout.grid_w; ++w) {
        table.tokens.push_back({t, static_cast<int>(h), static_cast<int>(w), seg});
      }
    }
  };

  push_frame(0.0, Segment::kReference);
  const double nt = static_cast<double>(layout.frames);
  for (std::size_t i = 1; i <= layout.frames; ++i) push_frame(static_cast<double>(i), Segment::kCondition);
  for (std::size_t i = 1; i <= layout.frames; ++i) {
    const double t = scheme == PositionScheme::kAligned ? static_cast<double>(i) : nt + static_cast<double>(i);
    push_frame(t, Segment::kTarget);
  }
  for (std::size_t j = 1; j <= layout.audio_tokens; ++j) {
    const double t = scheme == PositionScheme::kAligned ? static_cast<double>(j) * nt / static_cast<double>(layout.audio_tokens)
                                                        : static_cast<double>(j);
    table.tokens.push_back({t, 0, 0, Segment::kAudio});
  }
  return table;
}

RotarySplit rotary_split(std::size_t head_dim) {
  if (head_dim % 2 != 0 || head_dim < 6) {
    throw ShapeError("rotary: head_dim " + std::to_string(head_dim) +
                     " must be even and hold at least one pair per axis (>= 6)");
  }
  const std::size_t pairs = head_dim / 2;
  RotarySplit split;
  split.height = pairs / 3;
  split.width = pairs / 3;
  split.temporal = pairs - split.height - split.width;
  return split;
}

RotaryAngles rotary_angles(std::span<const TokenPosition> tokens, std::size_t head_dim, double base) {
  const RotarySplit split = rotary_split(head_dim);
  RotaryAngles out;
  out.tokens = tokens.size();
  out.pairs = split.pairs();
  out.cos.resize(out.tokens * out.pairs);
  out.sin.resize(out.tokens * out.pairs);

  // Frequencies are laid out temporal | height | width inside each head.
  std::vector<double> freq(out.pairs);
  std::vector<int> axis(out.pairs);
  std::size_t p = 0;
  const std::size_t counts[3] = {split.temporal, split.height, split.width};
  for (int a = 0; a < 3; ++a) {
    const double d_axis = 2.0 * static_cast<double>(counts[a]);
    for (std::size_t k = 0; k < counts[a]; ++k, ++p) {
      freq[p] = std::pow(base, -2.0 * static_cast<double>(k) / d_axis);
      axis[p] = a;
    }
  }

  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const double pos[3] = {tokens[t].temporal, static_cast<double>(tokens[t].height),
                           static_cast<double>(tokens[t].width)};
    for (std::size_t q = 0; q < out.pairs; ++q) {
      const double angle = pos[axis[q]] * freq[q];
      out.cos[t * out.pairs + q] = std::cos(angle);
      out.sin[t * out.pairs + q] = std::sin(angle);
    }
  }
  return out;
}

Tensor apply_rotary(const Tensor& x, std::span<const TokenPosition> tokens, double base) {
  if (x.rank() != 3) throw ShapeError("apply_rotary: expected [tokens, heads, head_dim], got " + to_string(x.shape()));
  if (x.dim(0) != tokens.size()) {
    throw ShapeError("apply_rotary: " + std::to_string(tokens.size()) + " positions for input " + to_string(x.shape()));
  }
  Graph g(Graph::Mode::kInference);
  return g.rotary(x, rotary_angles(tokens, x.dim(2), base));
}

}  // namespace avedit
