#include "avedit/io.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace avedit {

using nlohmann::json;

namespace {

json codec_to(const CodecConfig& c) {
  return {{"frames", c.frames}, {"height", c.height}, {"width", c.width},  {"fps", c.fps},
          {"sample_rate", c.sample_rate}, {"window", c.window}, {"bands", c.bands}};
}

CodecConfig codec_from(const json& j) {
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

json model_to(const ModelConfig& c) {
  return {{"blocks", c.blocks},
          {"hidden", c.hidden},
          {"heads", c.heads},
          {"vocab", c.vocab},
          {"caption_length", c.caption_length},
          {"mlp_ratio", c.mlp_ratio},
          {"video_channels", c.video_channels},
          {"audio_channels", c.audio_channels},
          {"a2v_group_size", c.a2v_group_size},
          {"a2v_window", c.a2v_window},
          {"v2a_group_size", c.v2a_group_size},
          {"v2a_window", c.v2a_window},
          {"acoustic_window", c.acoustic_window},
          {"rope_base", c.rope_base},
          {"positions", c.positions == PositionScheme::kAligned ? "aligned" : "naive"},
          {"layout",
           {{"frames", c.layout.frames},
            {"audio_tokens", c.layout.audio_tokens},
            {"grid_h", c.layout.grid_h},
            {"grid_w", c.layout.grid_w},
            {"reference_frames", c.layout.reference_frames}}}};
}

ModelConfig model_from(const json& j) {
  ModelConfig c;
  c.blocks = j.at("blocks");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.vocab = j.at("vocab");
  c.caption_length = j.at("caption_length");
  c.mlp_ratio = j.at("mlp_ratio");
  c.video_channels = j.at("video_channels");
  c.audio_channels = j.at("audio_channels");
  c.a2v_group_size = j.at("a2v_group_size");
  c.a2v_window = j.at("a2v_window");
  c.v2a_group_size = j.at("v2a_group_size");
  c.v2a_window = j.at("v2a_window");
  c.acoustic_window = j.at("acoustic_window");
  c.rope_base = j.at("rope_base");
  const std::string pos = j.at("positions");
  if (pos != "aligned" && pos != "naive") throw ConfigError("positions must be \"aligned\" or \"naive\"");
  c.positions = pos == "aligned" ? PositionScheme::kAligned : PositionScheme::kNaive;
  const json& l = j.at("layout");
  c.layout.frames = l.at("frames");
  c.layout.audio_tokens = l.at("audio_tokens");
  c.layout.grid_h = l.at("grid_h");
  c.layout.grid_w = l.at("grid_w");
  c.layout.reference_frames = l.at("reference_frames");
  return c;
}

json world_to(const WorldParams& p) {
  return {{"codec", codec_to(p.codec)},
          {"object_size", p.object_size},
          {"min_events", p.min_events},
          {"max_events", p.max_events},
          {"min_distractor_events", p.min_distractor_events},
          {"max_distractor_events", p.max_distractor_events},
          {"background", p.background},
          {"dim", p.dim},
          {"lit", p.lit},
          {"tone_amplitude", p.tone_amplitude},
          {"beep_seconds", p.beep_seconds},
          {"noise_db", p.noise_db}};
}

WorldParams world_from(const json& j) {
  WorldParams p;
  p.codec = codec_from(j.at("codec"));
  p.object_size = j.at("object_size");
  p.min_events = j.at("min_events");
  p.max_events = j.at("max_events");
  p.min_distractor_events = j.at("min_distractor_events");
  p.max_distractor_events = j.at("max_distractor_events");
  p.background = j.at("background");
  p.dim = j.at("dim");
  p.lit = j.at("lit");
  p.tone_amplitude = j.at("tone_amplitude");
  p.beep_seconds = j.at("beep_seconds");
  p.noise_db = j.at("noise_db");
  return p;
}

json train_to(const TrainConfig& c) {
  const auto& r = c.router;
  const auto& o = c.optimizer;
  return {{"model", model_to(c.model)},
          {"router",
           {{"p_joint", r.p_joint},
            {"p_audio_driven", r.p_audio_driven},
            {"p_video_driven", r.p_video_driven},
            {"p_context_null", r.p_context_null},
            {"text_drop", r.text_drop},
            {"base_drop", r.base_drop}}},
          {"optimizer",
           {{"lr", o.lr},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"eps", o.eps},
            {"weight_decay", o.weight_decay},
            {"clip_norm", o.clip_norm},
            {"cosine", o.cosine}}},
          {"augment", {{"max_dilation", c.augment.max_dilation}, {"bbox_probability", c.augment.bbox_probability}}},
          {"world", world_to(c.world)},
          {"steps", c.steps},
          {"seed", c.seed}};
}

TrainConfig train_from(const json& j) {
  TrainConfig c;
  c.model = model_from(j.at("model"));
  const json& r = j.at("router");
  c.router.p_joint = r.at("p_joint");
  c.router.p_audio_driven = r.at("p_audio_driven");
  c.router.p_video_driven = r.at("p_video_driven");
  c.router.p_context_null = r.at("p_context_null");
  c.router.text_drop = r.at("text_drop");
  c.router.base_drop = r.at("base_drop");
  const json& o = j.at("optimizer");
  c.optimizer.lr = o.at("lr");
  c.optimizer.beta1 = o.at("beta1");
  c.optimizer.beta2 = o.at("beta2");
  c.optimizer.eps = o.at("eps");
  c.optimizer.weight_decay = o.at("weight_decay");
  c.optimizer.clip_norm = o.at("clip_norm");
  c.optimizer.cosine = o.at("cosine");
  c.augment.max_dilation = j.at("augment").at("max_dilation");
  c.augment.bbox_probability = j.at("augment").at("bbox_probability");
  c.world = world_from(j.at("world"));
  c.steps = j.at("steps");
  c.seed = j.at("seed");
  return c;
}

json guidance_to(const GuidanceConfig& g) {
  return {{"steps", g.steps}, {"tau", g.tau}, {"s_ctx", g.s_ctx},
          {"s_v", g.s_v},     {"s_a", g.s_a}, {"joint_only", g.joint_only}};
}

GuidanceConfig guidance_from(const json& j) {
  GuidanceConfig g;
  g.steps = j.at("steps");
  g.tau = j.at("tau");
  g.s_ctx = j.at("s_ctx");
  g.s_v = j.at("s_v");
  g.s_a = j.at("s_a");
  g.joint_only = j.at("joint_only");
  return g;
}

// Overlays `input` onto `base`, rejecting keys that `base` does not have.
void merge_strict(json& base, const json& input, const std::string& path) {
  if (!input.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (auto it = input.begin(); it != input.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key \"" + key + "\"");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      if (slot.is_number() != it.value().is_number() || slot.is_boolean() != it.value().is_boolean() ||
          slot.is_string() != it.value().is_string()) {
        throw ConfigError("config key \"" + key + "\" has the wrong type");
      }
      if (slot.is_number_unsigned() && it.value().is_number_integer() && !it.value().is_number_unsigned()) {
        throw ConfigError("config key \"" + key + "\" must be non-negative");
      }
      if ((slot.is_number_integer()) && it.value().is_number_float()) {
        throw ConfigError("config key \"" + key + "\" must be an integer");
      }
      slot = it.value();
    }
  }
}

template <typename T, typename To, typename From>
T parse_strict(const std::string& text, const T& defaults, To to, From from) {
  json input;
  try {
    input = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  json merged = to(defaults);
  merge_strict(merged, input, "");
  T out;
  try {
    out = from(merged);
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  try {
    out.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return out;
}

}  // namespace

std::string to_json(const ModelConfig& config) { return model_to(config).dump(2); }
std::string to_json(const TrainConfig& config) { return train_to(config).dump(2); }
std::string to_json(const GuidanceConfig& config) { return guidance_to(config).dump(2); }
std::string to_json(const WorldParams& params) { return world_to(params).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  return parse_strict(text, ModelConfig{}, model_to, model_from);
}
TrainConfig train_config_from_json(const std::string& text) {
  return parse_strict(text, TrainConfig{}, train_to, train_from);
}
GuidanceConfig guidance_config_from_json(const std::string& text) {
  return parse_strict(text, GuidanceConfig{}, guidance_to, guidance_from);
}
WorldParams world_params_from_json(const std::string& text) {
  return parse_strict(text, WorldParams{}, world_to, world_from);
}

std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& overrides) {
  json doc = json::parse(json_text);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + o + "\" is not key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key \"" + key + "\"");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  return doc.dump(2);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::array<char, 8> kCheckpointMagic{'A', 'V', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::istream& in, const std::string& file) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw CheckpointError(file + ": truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void save_checkpoint(Model& model, const std::filesystem::path& file, std::size_t step) {
  json meta;
  meta["model"] = model_to(model.config);
  meta["seed"] = model.seed;
  meta["step"] = step;
  meta["dtype"] = "float64";
  json params = json::array();
  std::size_t offset = 0;
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  });
  meta["parameters"] = params;
  const std::string text = meta.dump();

  std::ofstream out(file, std::ios::binary);
  if (!out) throw CheckpointError(file.string() + ": cannot open for writing");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  model.for_each_parameter([&](const std::string&, Tensor& t) {
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  if (!out) throw CheckpointError(file.string() + ": write failed");
}

Model load_checkpoint(const std::filesystem::path& path, std::size_t* step) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(file + ": cannot open");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw CheckpointError(file + ": not a checkpoint");
  const std::uint64_t len = get_u64(in, file);
  if (len > (1u << 26)) throw CheckpointError(file + ": corrupt header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(file + ": truncated");
  json meta;
  ModelConfig config;
  try {
    meta = json::parse(text);
    config = model_from(meta.at("model"));
  } catch (const json::exception& e) {
    throw CheckpointError(file + ": bad metadata: " + e.what());
  }
  if (meta.value("dtype", std::string()) != "float64") throw CheckpointError(file + ": unsupported dtype");
  if (step) *step = meta.value("step", std::size_t{0});
  Model model = init_model(config, meta.value("seed", std::uint64_t{0}));
  const json& params = meta.at("parameters");
  std::size_t k = 0;
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    if (k >= params.size() || params[k].at("name") != name || params[k].at("shape").get<Shape>() != t.shape()) {
      throw CheckpointError(file + ": parameter " + name + " does not match the stored layout");
    }
    ++k;
    for (auto& v : t.mutable_data()) v = std::bit_cast<double>(get_u64(in, file));
  });
  if (k != params.size()) throw CheckpointError(file + ": extra parameters in checkpoint");
  if (in.peek() != EOF) throw CheckpointError(file + ": trailing bytes");
  return model;
}

std::string read_text(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error(file.string() + ": cannot open");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error(file.string() + ": cannot open for writing");
  out << text;
  if (!out) throw std::runtime_error(file.string() + ": write failed");
}

}  // namespace avedit
