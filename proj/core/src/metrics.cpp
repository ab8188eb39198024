#include "avedit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

namespace avedit {

IntervalSet::IntervalSet(std::vector<std::pair<double, double>> intervals) {
  for (const auto& [a, b] : intervals) {
    if (!(a <= b)) throw std::invalid_argument("IntervalSet: interval with start > end");
  }
  std::erase_if(intervals, [](const auto& iv) { return iv.first == iv.second; });
  std::sort(intervals.begin(), intervals.end());
  for (const auto& iv : intervals) {
    if (!intervals_.empty() && iv.first <= intervals_.back().second) {
      intervals_.back().second = std::max(intervals_.back().second, iv.second);
    } else {
      intervals_.push_back(iv);
    }
  }
}

double IntervalSet::measure() const {
  double m = 0.0;
  for (const auto& [a, b] : intervals_) m += b - a;
  return m;
}

IntervalSet IntervalSet::intersect(const IntervalSet& other) const {
  std::vector<std::pair<double, double>> out;
  std::size_t i = 0, j = 0;
  const auto& x = intervals_;
  const auto& y = other.intervals_;
  while (i < x.size() && j < y.size()) {
    const double lo = std::max(x[i].first, y[j].first), hi = std::min(x[i].second, y[j].second);
    if (lo < hi) out.emplace_back(lo, hi);
    if (x[i].second < y[j].second) {
      ++i;
    } else {
      ++j;
    }
  }
  return IntervalSet(std::move(out));
}

CtxF1 ctx_f1(const IntervalSet& generated, const IntervalSet& protected_set, const IntervalSet& reference) {
  CtxF1 r;
  const double g = generated.measure();
  if (g > 0.0) r.precision = 1.0 - generated.intersect(protected_set).measure() / g;
  const double ref = reference.measure();
  if (ref > 0.0) r.recall = generated.intersect(reference).measure() / ref;
  const double s = r.precision + r.recall;
  r.f1 = s > 0.0 ? 2.0 * r.precision * r.recall / s : 0.0;
  return r;
}

std::vector<double> extract_onsets(const std::vector<double>& envelope, double ratio, double window_seconds) {
  if (!(ratio > 1.0)) throw std::invalid_argument("extract_onsets: ratio must exceed 1");
  if (envelope.empty()) return {};
  std::vector<double> sorted = envelope;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const double threshold = ratio * median;
  std::vector<double> onsets;
  bool above = false;
  for (std::size_t j = 0; j < envelope.size(); ++j) {
    const bool now = envelope[j] > threshold;
    if (now && !above) onsets.push_back(static_cast<double>(j) * window_seconds);
    above = now;
  }
  return onsets;
}

namespace {

// Greedy one-to-one matching of sorted trains; optimal for a symmetric
// tolerance in one dimension.
std::size_t count_matches(const std::vector<double>& visual, const std::vector<double>& audio, int shift) {
  std::size_t i = 0, j = 0, n = 0;
  while (i < visual.size() && j < audio.size()) {
    const double d = audio[j] - (visual[i] + shift);
    if (std::abs(d) <= 0.5) {
      ++n;
      ++i;
      ++j;
    } else if (d < 0.0) {
      ++j;
    } else {
      ++i;
    }
  }
  return n;
}

}  // namespace

SyncResult sync_lag(const std::vector<double>& visual, const std::vector<double>& audio, int max_lag) {
  if (max_lag < 1) throw std::invalid_argument("sync_lag: max_lag must be >= 1");
  if (visual.empty() || audio.empty()) return {};
  std::vector<double> v = visual, a = audio;
  std::sort(v.begin(), v.end());
  std::sort(a.begin(), a.end());
  SyncResult best;
  std::size_t best_n = 0;
  bool first = true;
  for (int shift = -max_lag; shift <= max_lag; ++shift) {
    const std::size_t n = count_matches(v, a, shift);
    const bool better = first || n > best_n ||
                        (n == best_n && (std::abs(shift) < std::abs(best.lag) ||
                                         (std::abs(shift) == std::abs(best.lag) && shift < best.lag)));
    if (better) {
      best.lag = shift;
      best_n = n;
      first = false;
    }
  }
  best.score = static_cast<double>(best_n) / static_cast<double>(std::max(v.size(), a.size()));
  return best;
}

BandDominance band_dominance(const AudioLatent& latent, std::size_t band, double active) {
  const auto& v = latent.values;
  if (v.rank() != 2) throw ShapeError("band_dominance: expected [N_a, bands], got " + to_string(v.shape()));
  const std::size_t bands = v.dim(1);
  if (band >= bands) throw std::invalid_argument("band_dominance: band out of range");
  const auto env = audio_envelope(latent);
  std::vector<double> mean(bands, 0.0);
  std::size_t n = 0;
  for (std::size_t j = 0; j < env.size(); ++j) {
    if (env[j] <= active) continue;
    ++n;
    for (std::size_t b = 0; b < bands; ++b) mean[b] += v[j * bands + b];
  }
  if (n == 0) return {};
  BandDominance r;
  r.margin = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < bands; ++b) {
    if (b != band) r.margin = std::min(r.margin, (mean[band] - mean[b]) / static_cast<double>(n));
  }
  r.dominant = r.margin > 0.0;
  return r;
}

IntervalSet active_intervals(const AudioLatent& latent, double window_seconds, double active) {
  const auto env = audio_envelope(latent);
  std::vector<std::pair<double, double>> iv;
  for (std::size_t j = 0; j < env.size(); ++j) {
    if (env[j] > active) iv.emplace_back(static_cast<double>(j) * window_seconds, static_cast<double>(j + 1) * window_seconds);
  }
  return IntervalSet(std::move(iv));
}

std::vector<double> detect_blinks(const Tensor& pixels, const PixelMask& mask, double threshold) {
  if (pixels.rank() != 3 || pixels.size() != mask.flags.size()) {
    throw ShapeError("detect_blinks: pixels " + to_string(pixels.shape()) + " do not match the mask");
  }
  const std::size_t frames = pixels.dim(0), per = pixels.size() / frames;
  std::vector<double> out;
  for (std::size_t f = 0; f < frames; ++f) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = f * per; i < (f + 1) * per; ++i) {
      if (!mask.flags[i]) continue;
      sum += pixels[i];
      ++n;
    }
    if (n > 0 && sum / static_cast<double>(n) > threshold) out.push_back(static_cast<double>(f));
  }
  return out;
}

std::vector<double> onset_frames(const AudioLatent& latent, const CodecConfig& codec, double ratio) {
  std::vector<double> frames;
  for (double t : extract_onsets(audio_envelope(latent), ratio, codec.window_seconds())) {
    const double f = std::floor(t * static_cast<double>(codec.fps) + 1e-9);
    if (frames.empty() || frames.back() != f) frames.push_back(f);
  }
  return frames;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["precision"] = ctx.precision;
  j["recall"] = ctx.recall;
  j["ctx_f1"] = ctx.f1;
  j["sync_lag"] = sync.lag;
  j["sync_score"] = sync.score;
  j["sync_defined"] = sync_defined;
  j["band_dominance"] = band.dominant;
  j["band_margin"] = band.margin;
  j["instructed_band"] = instructed_band ? nlohmann::json(*instructed_band) : nlohmann::json(nullptr);
  j["passes"] = {{"total", accounting.total}, {"per_step", accounting.per_step}, {"stage", accounting.stage}};
  j["loss_curve"] = loss_curve;
  return j.dump(2);
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "precision,recall,ctx_f1,sync_lag,sync_score,sync_defined,band_dominance,band_margin,instructed_band,"
         "total_passes,loss_curve\n";
  out << ctx.precision << ',' << ctx.recall << ',' << ctx.f1 << ',' << sync.lag << ',' << sync.score << ','
      << (sync_defined ? 1 : 0) << ',' << (band.dominant ? 1 : 0) << ',' << band.margin << ','
      << (instructed_band ? std::to_string(*instructed_band) : std::string()) << ',' << accounting.total << ','
      << loss_curve << '\n';
  return out.str();
}

}  // namespace avedit
