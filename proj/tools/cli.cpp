#include "cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "avedit/io.hpp"
#include "avedit/pipeline.hpp"

namespace avedit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json tensor_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"values", std::vector<double>(t.data().begin(), t.data().end())}};
}

Tensor tensor_from_json(const json& j) {
  const Shape shape = j.at("shape").get<Shape>();
  auto values = j.at("values").get<std::vector<double>>();
  if (values.size() != numel(shape)) throw std::runtime_error("latents: value count does not match shape");
  return Tensor::from(shape, std::move(values));
}

void write_pgm(const fs::path& file, const Tensor& pixels, std::size_t frame) {
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << "P5\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(pixels[frame * h * w + i], 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
}

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text = path.empty() ? to_json(TrainConfig{}) : read_text(path);
  if (!overrides.empty()) text = apply_overrides(text, overrides);
  return train_config_from_json(text);
}

WorldParams world_for(const std::string& config_path, const ModelConfig& model) {
  WorldParams world;
  if (!config_path.empty()) {
    const json j = json::parse(read_text(config_path));
    world = j.contains("world") ? world_params_from_json(j.at("world").dump()) : world_params_from_json(j.dump());
  }
  if (!(layout_for(world.codec) == model.layout)) {
    throw std::runtime_error("codec geometry does not match the checkpoint's sequence layout");
  }
  return world;
}

// --- subcommands ------------------------------------------------------------

struct GenDataArgs {
  std::size_t scenes = 0;
  std::uint64_t seed = 0;
  std::string out, config;
};

void gen_data(const GenDataArgs& a, std::ostream& out) {
  const WorldParams world = a.config.empty() ? WorldParams{} : world_params_from_json(read_text(a.config));
  std::vector<Scene> scenes;
  scenes.reserve(a.scenes);
  for (std::size_t i = 0; i < a.scenes; ++i) scenes.push_back(generate_scene(derive_seed(a.seed, i), world));
  const DatasetManifest m = write_dataset(scenes, a.out, world.codec, a.seed);
  write_text(fs::path(a.out) / "world.json", to_json(world));
  out << "wrote " << m.scene_count << " scenes to " << a.out << "\n";
}

struct TrainArgs {
  std::string data, config, out;
  std::optional<std::size_t> steps;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
};

void train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig tc = load_train_config(a.config, a.overrides);
  if (a.steps) tc.steps = *a.steps;
  tc.seed = a.seed;
  tc.validate();
  const auto scenes = read_dataset(a.data, tc.world.codec);
  if (scenes.empty()) throw std::runtime_error("dataset " + a.data + " holds no scenes");
  std::vector<EncodedScene> encoded;
  encoded.reserve(scenes.size());
  for (const auto& s : scenes) encoded.push_back(encode_scene(s, tc.world));

  Model model = init_model(tc.model, tc.seed);
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 20);
  const TrainResult r = train_loop(model, encoded, tc, [&](const LossRecord& rec) {
    if (rec.step % every == 0 || rec.step == tc.steps) {
      err << "step " << rec.step << "/" << tc.steps << " loss " << rec.loss << " grad " << rec.grad_norm << "\n";
    }
  });

  const fs::path ckpt(a.out);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(model, ckpt, tc.steps);
  fs::path csv = ckpt, cfg = ckpt;
  write_text(csv.replace_extension(".loss.csv"), loss_curve_csv(r.curve));
  write_text(cfg.replace_extension(".config.json"), to_json(tc));
  out << "trained " << tc.steps << " steps on " << encoded.size() << " scenes; clipped " << r.clipped_steps
      << "; checkpoint " << ckpt.string() << "\n";
}

struct SampleArgs {
  std::string ckpt, scene, out, config;
  std::optional<std::size_t> edit_band;
  GuidanceConfig guidance;
  std::uint64_t seed = 0;
};

void sample_cmd(const SampleArgs& a, std::ostream& out) {
  a.guidance.validate();
  const Model model = load_checkpoint(a.ckpt);
  const WorldParams world = world_for(a.config, model.config);
  const Scene scene = read_scene(a.scene);
  check_scene(scene, world);
  if (a.edit_band && *a.edit_band >= world.codec.bands) throw UsageError("--edit-band must be below the band count");

  ConditionBundle cond = scene_condition(encode_scene(scene, world), model.config, world);
  if (a.edit_band) cond = with_band(std::move(cond), *a.edit_band);
  const SampleResult r = sample(model, cond, a.guidance, make_anchors(world.codec), a.seed, env_threads());
  const SampleEvaluation e = evaluate_sample(scene, r.video, r.audio, world, a.edit_band);

  const fs::path dir(a.out);
  fs::create_directories(dir / "frames");
  for (std::size_t f = 0; f < e.pixels.dim(0); ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.pgm", f);
    write_pgm(dir / "frames" / name, e.pixels, f);
  }
  std::ostringstream csv;
  csv << "token,time_s,envelope\n";
  const auto env = audio_envelope(e.audio);
  for (std::size_t j = 0; j < env.size(); ++j) {
    csv << j << "," << static_cast<double>(j) * world.codec.window_seconds() << "," << env[j] << "\n";
  }
  write_text(dir / "envelope.csv", csv.str());
  write_latents(dir / "latents.json", r.video, r.audio);

  const auto& acc = r.accounting;
  const json accounting = {{"steps", a.guidance.steps}, {"tau", a.guidance.tau}, {"total", acc.total},
                           {"per_step", acc.per_step},   {"stage", acc.stage}};
  write_text(dir / "accounting.json", accounting.dump(2) + "\n");
  fs::copy_file(a.scene, dir / "scene.bin", fs::copy_options::overwrite_existing);

  json used = {{"checkpoint", a.ckpt},
               {"scene", a.scene},
               {"seed", a.seed},
               {"guidance", json::parse(to_json(a.guidance))},
               {"world", json::parse(to_json(world))}};
  if (a.edit_band) used["edit_band"] = *a.edit_band;
  write_text(dir / "config.json", used.dump(2) + "\n");

  MetricsReport report = e.report;
  report.accounting = acc;
  write_text(dir / "report.json", report.to_json());
  out << "sampled " << a.guidance.steps << " steps with " << acc.total << " forwards into " << dir.string() << "\n";
}

struct EvalArgs {
  std::string pred, ref, out;
};

void eval_cmd(const EvalArgs& a, std::ostream& out) {
  const fs::path pred(a.pred);
  fs::path ref(a.ref);
  if (fs::is_directory(ref)) ref /= "scene.bin";
  WorldParams world;
  std::optional<std::size_t> band;
  if (fs::exists(pred / "config.json")) {
    const json used = json::parse(read_text(pred / "config.json"));
    if (used.contains("world")) world = world_params_from_json(used.at("world").dump());
    if (used.contains("edit_band")) band = used.at("edit_band").get<std::size_t>();
  }
  const Scene scene = read_scene(ref);
  const auto [video, audio] = read_latents(pred / "latents.json");
  const SampleEvaluation e = evaluate_sample(scene, video, audio, world, band);
  MetricsReport report = e.report;
  if (fs::exists(pred / "accounting.json")) {
    const json acc = json::parse(read_text(pred / "accounting.json"));
    report.accounting.total = acc.at("total").get<std::size_t>();
    report.accounting.per_step = acc.at("per_step").get<std::vector<std::size_t>>();
    report.accounting.stage = acc.at("stage").get<std::vector<int>>();
  }
  const std::string text = report.to_json();
  const fs::path dest(a.out);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_text(dest, text);
  out << text;
}

void inspect(const std::string& path, std::ostream& out) {
  std::size_t step = 0;
  Model model = load_checkpoint(path, &step);
  out << "config " << to_json(model.config) << "\n";
  out << "seed " << model.seed << "\nstep " << step << "\nparameters " << model.parameter_count() << "\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-40s %-16s %12s %12s %12s\n", "name", "shape", "mean", "std", "max_abs");
  out << line;
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    double sum = 0.0, sq = 0.0, peak = 0.0;
    for (double v : t.data()) {
      sum += v;
      sq += v * v;
      peak = std::max(peak, std::abs(v));
    }
    const double n = static_cast<double>(t.size());
    const double mean = sum / n;
    std::snprintf(line, sizeof(line), "%-40s %-16s %12.4e %12.4e %12.4e\n", name.c_str(), to_string(t.shape()).c_str(),
                  mean, std::sqrt(std::max(0.0, sq / n - mean * mean)), peak);
    out << line;
  });
}

}  // namespace

void write_latents(const fs::path& file, const Tensor& video, const Tensor& audio) {
  write_text(file, json{{"video", tensor_json(video)}, {"audio", tensor_json(audio)}}.dump() + "\n");
}

std::pair<Tensor, Tensor> read_latents(const fs::path& file) {
  const json j = json::parse(read_text(file));
  return {tensor_from_json(j.at("video")), tensor_from_json(j.at("audio"))};
}

std::size_t env_threads() {
  const char* v = std::getenv("AVEDIT_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError(std::string("AVEDIT_THREADS must be a positive integer, got ") + v);
  return static_cast<std::size_t>(n);
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Audio-visual editing toy pipeline"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  gen->add_option("--scenes", gd.scenes, "Number of scenes")->required();
  gen->add_option("--seed", gd.seed, "Global seed")->required();
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--config", gd.config, "World parameters JSON")->check(CLI::ExistingFile);

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Train a model on a dataset");
  trn->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--config", tr.config, "Training config JSON")->check(CLI::ExistingFile);
  trn->add_option("--steps", tr.steps, "Optimizer steps");
  trn->add_option("--seed", tr.seed, "Seed")->required();
  trn->add_option("--out", tr.out, "Checkpoint path")->required();
  trn->add_option("--set", tr.overrides, "Config override key=value");

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "Edit one scene with a trained model");
  smp->add_option("--ckpt", sa.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  smp->add_option("--scene", sa.scene, "Scene file")->required()->check(CLI::ExistingFile);
  smp->add_option("--edit-band", sa.edit_band, "Instructed band class");
  smp->add_option("--tau", sa.guidance.tau, "Last stage-1 step")->capture_default_str();
  smp->add_option("--s-ctx", sa.guidance.s_ctx, "Context guidance scale")->capture_default_str();
  smp->add_option("--s-v", sa.guidance.s_v, "Video synchronization scale")->capture_default_str();
  smp->add_option("--s-a", sa.guidance.s_a, "Audio synchronization scale")->capture_default_str();
  smp->add_option("--steps", sa.guidance.steps, "Euler steps")->capture_default_str();
  smp->add_flag("--joint-only", sa.guidance.joint_only, "Unguided joint sampler");
  smp->add_option("--seed", sa.seed, "Noise seed")->required();
  smp->add_option("--out", sa.out, "Output directory")->required();
  smp->add_option("--config", sa.config, "World parameters or training config JSON")->check(CLI::ExistingFile);

  EvalArgs ev;
  auto* evl = app.add_subcommand("eval", "Score a sample against its scene");
  evl->add_option("--pred", ev.pred, "Sample output directory")->required()->check(CLI::ExistingDirectory);
  evl->add_option("--ref", ev.ref, "Scene file or directory holding scene.bin")->required()->check(CLI::ExistingPath);
  evl->add_option("--out", ev.out, "Report JSON path")->required();

  std::string ckpt;
  auto* ins = app.add_subcommand("inspect", "Print a checkpoint's config and parameter statistics");
  ins->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) gen_data(gd, out);
    if (*trn) train(tr, out, err);
    if (*smp) sample_cmd(sa, out);
    if (*evl) eval_cmd(ev, out);
    if (*ins) inspect(ckpt, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace avedit::cli
