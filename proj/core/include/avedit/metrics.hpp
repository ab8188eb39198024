#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "avedit/codecs.hpp"
#include "avedit/sampler.hpp"
#include "avedit/tensor.hpp"

namespace avedit {

/// Union of half-open intervals [start, end) in seconds, kept sorted and
/// disjoint. Touching intervals are merged.
class IntervalSet {
 public:
  IntervalSet() = default;
  /// Empty intervals (start == end) are dropped; start > end throws.
  explicit IntervalSet(std::vector<std::pair<double, double>> intervals);

  const std::vector<std::pair<double, double>>& intervals() const { return intervals_; }
  bool empty() const { return intervals_.empty(); }
  double measure() const;
  IntervalSet intersect(const IntervalSet& other) const;
  bool operator==(const IntervalSet&) const = default;

 private:
  std::vector<std::pair<double, double>> intervals_;
};

struct CtxF1 {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
};

/// precision = 1 - |gen & protected| / |gen| (1 for empty gen), recall =
/// |gen & reference| / |reference| (1 for empty reference).
CtxF1 ctx_f1(const IntervalSet& generated, const IntervalSet& protected_set, const IntervalSet& reference);

/// Onset at token j when env[j] > ratio * median(env) and env[j-1] is not
/// (env[-1] counts as below). Times are j * window_seconds.
std::vector<double> extract_onsets(const std::vector<double>& envelope, double ratio, double window_seconds);

struct SyncResult {
  int lag = 0;
  double score = 0.0;
};

/// Best integer shift of the visual events (in frames) onto the audio events.
/// Events match one-to-one when within half a frame after shifting.
SyncResult sync_lag(const std::vector<double>& visual, const std::vector<double>& audio, int max_lag);

struct BandDominance {
  bool dominant = false;
  double margin = 0.0;
};

inline constexpr double kActiveEnergy = 1e-4;

/// Over tokens whose envelope exceeds `active`, band k's mean feature must
/// exceed every other band's mean. margin is the smallest such gap.
BandDominance band_dominance(const AudioLatent& latent, std::size_t band, double active = kActiveEnergy);

/// Tokens with envelope above `active`, as time intervals.
IntervalSet active_intervals(const AudioLatent& latent, double window_seconds, double active = kActiveEnergy);

/// Frames whose mean brightness inside the mask exceeds `threshold`.
/// pixels: [F, H, W].
std::vector<double> detect_blinks(const Tensor& pixels, const PixelMask& mask, double threshold = 0.6);

/// Audio onsets quantized to frame indices.
std::vector<double> onset_frames(const AudioLatent& latent, const CodecConfig& codec, double ratio = 10.0);

struct MetricsReport {
  CtxF1 ctx;
  SyncResult sync;
  bool sync_defined = false;  // both event trains non-empty
  BandDominance band;
  std::optional<std::size_t> instructed_band;
  PassAccounting accounting;
  std::string loss_curve;

  std::string to_json() const;
  /// Header line plus one row.
  std::string to_csv() const;
};

}  // namespace avedit
