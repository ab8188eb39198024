#include "avedit/world.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <sstream>

namespace avedit {

void WorldParams::validate() const {
  codec.validate();
  if (object_size == 0 || object_size % 2 != 0) throw std::invalid_argument("WorldParams: object_size must be even");
  if (object_size > codec.height || object_size > codec.width) {
    throw std::invalid_argument("WorldParams: object larger than the canvas");
  }
  if (min_events < 1 || max_events > 3 || min_events > max_events) {
    throw std::invalid_argument("WorldParams: target events must satisfy 1 <= min <= max <= 3");
  }
  if (min_distractor_events > max_distractor_events) {
    throw std::invalid_argument("WorldParams: min_distractor_events > max_distractor_events");
  }
  if (max_events + max_distractor_events > codec.frames) {
    throw std::invalid_argument("WorldParams: more events than frames");
  }
  if (codec.bands < 2 || codec.bands > 8) throw std::invalid_argument("WorldParams: world supports 2..8 bands");
  if (beep_seconds <= 0.0 || beep_seconds > 1.0 / static_cast<double>(codec.fps)) {
    throw std::invalid_argument("WorldParams: beep must fit inside one frame");
  }
}

namespace {

struct Square {
  std::size_t y = 0, x = 0;
};

bool overlaps(const Square& a, const Square& b, std::size_t size) {
  return a.y < b.y + size && b.y < a.y + size && a.x < b.x + size && b.x < a.x + size;
}

Square random_square(Rng& rng, const WorldParams& p) {
  // Even coordinates keep the square aligned with the 2x2 latent patches.
  const auto ny = static_cast<std::int64_t>((p.codec.height - p.object_size) / 2);
  const auto nx = static_cast<std::int64_t>((p.codec.width - p.object_size) / 2);
  return {2 * static_cast<std::size_t>(rng.integer(0, ny)), 2 * static_cast<std::size_t>(rng.integer(0, nx))};
}

std::vector<std::size_t> pick_frames(Rng& rng, std::size_t count, std::vector<std::size_t> pool) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(pool.size()) - 1));
    out.push_back(pool[j]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void paint(std::vector<float>& video, const WorldParams& p, const Square& s, const std::vector<std::size_t>& lit) {
  const auto& c = p.codec;
  for (std::size_t f = 0; f < c.frames; ++f) {
    const bool on = std::find(lit.begin(), lit.end(), f) != lit.end();
    for (std::size_t y = s.y; y < s.y + p.object_size; ++y) {
      for (std::size_t x = s.x; x < s.x + p.object_size; ++x) {
        video[(f * c.height + y) * c.width + x] = static_cast<float>(on ? p.lit : p.dim);
      }
    }
  }
}

std::size_t samples_per_frame(const CodecConfig& c) { return c.sample_rate / c.fps; }
std::size_t beep_samples(const WorldParams& p) {
  return static_cast<std::size_t>(std::lround(p.beep_seconds * static_cast<double>(p.codec.sample_rate)));
}

void add_beeps(std::vector<double>& signal, const WorldParams& p, std::size_t band,
               const std::vector<std::size_t>& frames) {
  const double hz = band_center_hz(band, p.codec);
  const double sr = static_cast<double>(p.codec.sample_rate);
  for (std::size_t f : frames) {
    const std::size_t start = f * samples_per_frame(p.codec);
    const std::size_t end = std::min(signal.size(), start + beep_samples(p));
    for (std::size_t i = start; i < end; ++i) {
      signal[i] += p.tone_amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i - start) / sr);
    }
  }
}

std::vector<Interval> intervals_for(const WorldParams& p, const std::vector<std::size_t>& frames) {
  std::vector<Interval> out;
  for (std::size_t f : frames) {
    const double start = static_cast<double>(f) / static_cast<double>(p.codec.fps);
    out.emplace_back(static_cast<float>(start), static_cast<float>(start + p.beep_seconds));
  }
  return out;
}

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace

Scene generate_scene(Rng& rng, const WorldParams& p) {
  p.validate();
  const auto& c = p.codec;
  Scene s;
  s.band = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(c.bands) - 1));
  s.distractor_band = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(c.bands) - 2));
  if (s.distractor_band >= s.band) ++s.distractor_band;

  const Square target = random_square(rng, p);
  Square distractor;
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    distractor = random_square(rng, p);
    placed = !overlaps(target, distractor, p.object_size);
  }
  if (!placed) throw WorldError("generate_scene: could not place the distractor after 100 tries");

  const auto n_distractor = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(p.min_distractor_events),
                                                                 static_cast<std::int64_t>(p.max_distractor_events)));
  const auto n_target = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(p.min_events), static_cast<std::int64_t>(p.max_events)));
  std::vector<std::size_t> all(c.frames);
  for (std::size_t f = 0; f < c.frames; ++f) all[f] = f;
  s.distractor_frames = pick_frames(rng, n_distractor, all);
  std::vector<std::size_t> free;
  for (std::size_t f : all) {
    if (std::find(s.distractor_frames.begin(), s.distractor_frames.end(), f) == s.distractor_frames.end()) {
      free.push_back(f);
    }
  }
  s.target_frames = pick_frames(rng, n_target, free);

  s.video.assign(c.frames * c.height * c.width, static_cast<float>(p.background));
  paint(s.video, p, target, s.target_frames);
  paint(s.video, p, distractor, s.distractor_frames);

  s.mask = PixelMask::empty(c.frames, c.height, c.width);
  for (std::size_t f = 0; f < c.frames; ++f) {
    for (std::size_t y = target.y; y < target.y + p.object_size; ++y) {
      for (std::size_t x = target.x; x < target.x + p.object_size; ++x) s.mask.set(f, y, x, true);
    }
  }

  std::vector<double> tgt(c.samples(), 0.0), base(c.samples(), 0.0);
  add_beeps(tgt, p, s.band, s.target_frames);
  const double noise = p.tone_amplitude * std::pow(10.0, p.noise_db / 20.0);
  for (auto& v : base) v = noise * rng.normal();
  add_beeps(base, p, s.distractor_band, s.distractor_frames);
  s.target_audio = to_float(tgt);
  s.base_audio = to_float(base);

  s.visual_caption = {vocab::kSquare, vocab::kKindBase + s.band};
  s.audio_caption = {vocab::kBeep, vocab::kBandBase + s.band};
  s.target_intervals = intervals_for(p, s.target_frames);
  s.protected_intervals = intervals_for(p, s.distractor_frames);
  return s;
}

Scene generate_scene(std::uint64_t seed, const WorldParams& params) {
  Rng rng(seed);
  Scene s = generate_scene(rng, params);
  s.seed = seed;
  return s;
}

void check_scene(const Scene& s, const WorldParams& p) {
  const auto& c = p.codec;
  auto fail = [&](const std::string& what) {
    throw WorldError("scene " + std::to_string(s.seed) + ": " + what);
  };
  if (s.video.size() != c.frames * c.height * c.width) fail("video has the wrong size");
  if (s.target_audio.size() != c.samples() || s.base_audio.size() != c.samples()) fail("audio has the wrong length");
  if (s.band == s.distractor_band) fail("target and distractor share a band");

  // Mask: the same object-sized square in every frame, holding only target pixels.
  const std::size_t area = p.object_size * p.object_size;
  for (std::size_t f = 0; f < c.frames; ++f) {
    std::size_t n = 0;
    for (std::size_t y = 0; y < c.height; ++y) {
      for (std::size_t x = 0; x < c.width; ++x) {
        if (s.mask.at(f, y, x) != s.mask.at(0, y, x)) fail("mask moves between frames");
        if (!s.mask.at(f, y, x)) continue;
        ++n;
        const float v = s.video[(f * c.height + y) * c.width + x];
        const bool lit = std::find(s.target_frames.begin(), s.target_frames.end(), f) != s.target_frames.end();
        if (v != static_cast<float>(lit ? p.lit : p.dim)) fail("mask covers a non-target pixel");
      }
    }
    if (n != area) fail("mask does not cover exactly the target object");
  }

  // Every target beep co-occurs with a target blink within one frame.
  if (s.target_intervals.size() != s.target_frames.size()) fail("interval/frame count mismatch");
  for (const auto& [start, end] : s.target_intervals) {
    if (!(start < end)) fail("empty target interval");
    const double frame = start * static_cast<double>(c.fps);
    bool near = false;
    for (std::size_t f : s.target_frames) near |= std::abs(frame - static_cast<double>(f)) <= 1.0;
    if (!near) fail("target beep without a nearby blink");
  }

  // Target audio is silent outside target beeps; base audio carries no target tone.
  const double sr = static_cast<double>(c.sample_rate);
  auto inside = [&](std::size_t i, const std::vector<Interval>& iv) {
    const double t = static_cast<double>(i) / sr;
    for (const auto& [a, b] : iv) {
      if (t >= a - 1e-6 && t < b + 1e-6) return true;
    }
    return false;
  };
  for (std::size_t i = 0; i < s.target_audio.size(); ++i) {
    if (s.target_audio[i] != 0.0f && !inside(i, s.target_intervals)) fail("target audio outside target intervals");
  }
  const double floor = 6.0 * p.tone_amplitude * std::pow(10.0, p.noise_db / 20.0);
  for (std::size_t i = 0; i < s.base_audio.size(); ++i) {
    if (!inside(i, s.protected_intervals) && std::abs(s.base_audio[i]) > floor) {
      fail("base audio exceeds the noise floor outside distractor beeps");
    }
  }
}

EncodedScene encode_scene(const Scene& s, const WorldParams& params, const LatentScaling& scaling) {
  const auto& codec = params.codec;
  EncodedScene e;
  const Shape px{codec.frames, codec.height, codec.width};
  if (s.video.size() != numel(px)) throw ShapeError("encode_scene: video does not match the codec geometry");
  e.pixels = Tensor::from(px, std::vector<double>(s.video.begin(), s.video.end()));
  e.video = scaling.video_to_model(video_encode(e.pixels).values);
  e.target_audio = scaling.audio_to_model(audio_encode(std::span<const float>(s.target_audio), codec).values);
  e.base_audio = scaling.audio_to_model(audio_encode(std::span<const float>(s.base_audio), codec).values);

  // Reference: the target object alone at full brightness on the background.
  std::vector<double> ref(codec.height * codec.width, params.background);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (s.mask.flags[i]) ref[i] = params.lit;
  }
  e.reference = scaling.video_to_model(video_encode(Tensor::from({1, codec.height, codec.width}, ref)).values);
  e.mask = s.mask;
  e.visual_caption = s.visual_caption;
  e.audio_caption = s.audio_caption;
  e.speech_caption = s.speech_caption;
  return e;
}

ConditionBundle make_condition(const EncodedScene& e, const PixelMask& mask, std::size_t caption_length,
                               double background, const LatentScaling& scaling) {
  if (mask.flags.size() != e.pixels.size()) throw ShapeError("make_condition: mask does not match the video");
  std::vector<double> px(e.pixels.data().begin(), e.pixels.data().end());
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (mask.flags[i]) px[i] = background;
  }
  ConditionBundle c;
  c.masked_video = scaling.video_to_model(video_encode(Tensor::from(e.pixels.shape(), std::move(px))).values);
  c.mask = mask_to_latent(mask);
  c.reference = e.reference;
  c.base_audio = e.base_audio;
  c.visual_caption = pad_caption(e.visual_caption, caption_length);
  c.audio_caption = pad_caption(e.audio_caption, caption_length);
  c.speech_caption = pad_caption(e.speech_caption, caption_length);
  return c;
}

ConditionBundle with_band(ConditionBundle cond, std::size_t band) {
  if (band >= 8) throw std::invalid_argument("with_band: band must be in 0..7");
  for (auto& t : cond.visual_caption) {
    if (t >= vocab::kKindBase && t < vocab::kKindBase + 8) t = vocab::kKindBase + band;
  }
  for (auto& t : cond.audio_caption) {
    if (t >= vocab::kBandBase && t < vocab::kBandBase + 8) t = vocab::kBandBase + band;
  }
  return cond;
}

// ---------------------------------------------------------------------------
// Dataset files

std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t index) {
  // splitmix64 of the combined value.
  std::uint64_t z = global_seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

constexpr std::array<char, 8> kSceneMagic{'A', 'V', 'S', 'C', 'E', 'N', 'E', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in, const std::string& file) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw DatasetError(file + ": truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

void put_array(std::ostream& out, const std::vector<std::uint32_t>& dims, const std::vector<float>& values) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_le<std::uint32_t>(out, d);
  for (float v : values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

std::vector<float> get_array(std::istream& in, const std::string& file, std::vector<std::uint32_t>& dims) {
  const auto rank = get_le<std::uint32_t>(in, file);
  if (rank > 8) throw DatasetError(file + ": corrupt array header");
  dims.resize(rank);
  std::uint64_t n = 1;
  for (auto& d : dims) {
    d = get_le<std::uint32_t>(in, file);
    n *= d;
  }
  if (n > (1u << 28)) throw DatasetError(file + ": corrupt array size");
  std::vector<float> v(n);
  for (auto& x : v) x = std::bit_cast<float>(get_le<std::uint32_t>(in, file));
  return v;
}

template <typename T>
std::vector<float> as_floats(const std::vector<T>& v) {
  return {v.begin(), v.end()};
}

std::vector<float> flatten(const std::vector<Interval>& iv) {
  std::vector<float> out;
  for (const auto& [a, b] : iv) {
    out.push_back(static_cast<float>(a));
    out.push_back(static_cast<float>(b));
  }
  return out;
}

std::vector<std::size_t> as_ids(const std::vector<float>& v) {
  std::vector<std::size_t> out;
  for (float x : v) out.push_back(static_cast<std::size_t>(x));
  return out;
}

std::vector<Interval> as_intervals(const std::vector<float>& v, const std::string& file) {
  if (v.size() % 2 != 0) throw DatasetError(file + ": odd interval array");
  std::vector<Interval> out;
  for (std::size_t i = 0; i < v.size(); i += 2) out.emplace_back(v[i], v[i + 1]);
  return out;
}

nlohmann::json codec_json(const CodecConfig& c) {
  return {{"frames", c.frames}, {"height", c.height},           {"width", c.width}, {"fps", c.fps},
          {"sample_rate", c.sample_rate}, {"window", c.window}, {"bands", c.bands}};
}

CodecConfig codec_from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.frames = j.at("frames");
  c.height = j.at("height");
  c.width = j.at("width");
  c.fps = j.at("fps");
  c.sample_rate = j.at("sample_rate");
  c.window = j.at("window");
  c.bands = j.at("bands");
  return c;
}

}  // namespace

void write_scene(const Scene& s, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DatasetError(file.string() + ": cannot open for writing");
  out.write(kSceneMagic.data(), kSceneMagic.size());
  put_le<std::uint64_t>(out, s.seed);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.band));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.distractor_band));
  const auto u32 = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  put_array(out, {u32(s.mask.frames), u32(s.mask.height), u32(s.mask.width)}, s.video);
  put_array(out, {u32(s.target_audio.size())}, s.target_audio);
  put_array(out, {u32(s.base_audio.size())}, s.base_audio);
  put_array(out, {u32(s.mask.frames), u32(s.mask.height), u32(s.mask.width)}, as_floats(s.mask.flags));
  put_array(out, {u32(s.visual_caption.size())}, as_floats(s.visual_caption));
  put_array(out, {u32(s.audio_caption.size())}, as_floats(s.audio_caption));
  put_array(out, {u32(s.speech_caption.size())}, as_floats(s.speech_caption));
  put_array(out, {u32(s.target_frames.size())}, as_floats(s.target_frames));
  put_array(out, {u32(s.distractor_frames.size())}, as_floats(s.distractor_frames));
  put_array(out, {u32(s.target_intervals.size()), 2}, flatten(s.target_intervals));
  put_array(out, {u32(s.protected_intervals.size()), 2}, flatten(s.protected_intervals));
  if (!out) throw DatasetError(file.string() + ": write failed");
}

Scene read_scene(const std::filesystem::path& path) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(file + ": cannot open");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kSceneMagic) throw DatasetError(file + ": not a scene file");
  Scene s;
  s.seed = get_le<std::uint64_t>(in, file);
  s.band = get_le<std::uint32_t>(in, file);
  s.distractor_band = get_le<std::uint32_t>(in, file);
  std::vector<std::uint32_t> dims;
  s.video = get_array(in, file, dims);
  if (dims.size() != 3) throw DatasetError(file + ": video must be [F, H, W]");
  const std::vector<std::uint32_t> vdims = dims;
  s.target_audio = get_array(in, file, dims);
  s.base_audio = get_array(in, file, dims);
  const auto mask = get_array(in, file, dims);
  if (dims != vdims) throw DatasetError(file + ": mask shape differs from video");
  s.mask = PixelMask::empty(dims[0], dims[1], dims[2]);
  for (std::size_t i = 0; i < mask.size(); ++i) s.mask.flags[i] = mask[i] != 0.0f;
  s.visual_caption = as_ids(get_array(in, file, dims));
  s.audio_caption = as_ids(get_array(in, file, dims));
  s.speech_caption = as_ids(get_array(in, file, dims));
  s.target_frames = as_ids(get_array(in, file, dims));
  s.distractor_frames = as_ids(get_array(in, file, dims));
  s.target_intervals = as_intervals(get_array(in, file, dims), file);
  s.protected_intervals = as_intervals(get_array(in, file, dims), file);
  if (in.peek() != EOF) throw DatasetError(file + ": trailing bytes");
  return s;
}

DatasetManifest write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                              const CodecConfig& codec, std::uint64_t global_seed) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.scene_count = scenes.size();
  m.codec = codec;
  m.global_seed = global_seed;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05zu.bin", i);
    write_scene(scenes[i], dir / name);
    m.files.emplace_back(name);
  }
  nlohmann::json j{{"format", "avedit-scenes"}, {"version", 1},        {"scene_count", m.scene_count},
                   {"global_seed", global_seed}, {"codec", codec_json(codec)}, {"scenes", m.files}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DatasetError((dir / "manifest.json").string() + ": cannot open for writing");
  out << j.dump(2) << "\n";
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DatasetError(path.string() + ": cannot open");
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "avedit-scenes") throw DatasetError(path.string() + ": unknown format");
    DatasetManifest m;
    m.scene_count = j.at("scene_count");
    m.global_seed = j.at("global_seed");
    m.codec = codec_from_json(j.at("codec"));
    m.files = j.at("scenes").get<std::vector<std::string>>();
    if (m.files.size() != m.scene_count) throw DatasetError(path.string() + ": scene_count does not match the file list");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
}

std::vector<Scene> read_dataset(const std::filesystem::path& dir, const std::optional<CodecConfig>& expected) {
  const DatasetManifest m = read_manifest(dir);
  if (expected && !(*expected == m.codec)) {
    throw DatasetError((dir / "manifest.json").string() + ": codec config mismatch (manifest " +
                       codec_json(m.codec).dump() + ", expected " + codec_json(*expected).dump() + ")");
  }
  std::vector<Scene> scenes;
  for (const auto& f : m.files) {
    Scene s = read_scene(dir / f);
    if (s.video.size() != m.codec.frames * m.codec.height * m.codec.width) {
      throw DatasetError((dir / f).string() + ": video shape does not match the manifest codec");
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace avedit
