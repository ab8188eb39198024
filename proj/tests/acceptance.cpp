// Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. Optional arguments select criteria by number.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "avedit/io.hpp"
#include "avedit/pipeline.hpp"
#include "avedit/rope.hpp"
#include "avedit/training.hpp"
#include "support.hpp"

namespace avedit {
namespace {

using testing::micro_config;
using testing::random_bundle;
using testing::random_model;
using testing::random_state;
using testing::random_tensor;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// --- 1 ---------------------------------------------------------------------

Outcome rope_conformance() {
  Rng rng(101);
  std::size_t mismatches = 0;
  for (int c = 0; c < 100; ++c) {
    SequenceLayout l;
    l.frames = static_cast<std::size_t>(rng.integer(1, 16));
    l.audio_tokens = static_cast<std::size_t>(rng.integer(1, 64));
    l.grid_h = static_cast<std::size_t>(rng.integer(1, 4));
    l.grid_w = static_cast<std::size_t>(rng.integer(1, 4));
    const PositionTable t = assign_positions(l);
    // Reference at time 0, condition and target frame i at time i (1-based),
    // audio token j at j * N_t / N_a with zero spatial index.
    std::size_t k = 0;
    auto expect = [&](double time, int h, int w, Segment seg) {
      const auto& p = t.tokens.at(k++);
      if (p.temporal != time || p.height != h || p.width != w || p.segment != seg) ++mismatches;
    };
    auto frame = [&](double time, Segment seg) {
      for (std::size_t h = 0; h < l.grid_h; ++h) {
        for (std::size_t w = 0; w < l.grid_w; ++w) expect(time, int(h), int(w), seg);
      }
    };
    frame(0.0, Segment::kReference);
    for (std::size_t i = 1; i <= l.frames; ++i) frame(double(i), Segment::kCondition);
    for (std::size_t i = 1; i <= l.frames; ++i) frame(double(i), Segment::kTarget);
    for (std::size_t j = 1; j <= l.audio_tokens; ++j) {
      expect(double(j) * double(l.frames) / double(l.audio_tokens), 0, 0, Segment::kAudio);
    }
    if (k != t.tokens.size()) ++mismatches;
  }
  return {mismatches == 0, fmt("100 layouts, %zu mismatching tokens", mismatches)};
}

// --- 2 ---------------------------------------------------------------------

std::vector<std::size_t> unmasked_coords(const ModelConfig& cfg, const LatentMask& mask) {
  std::vector<std::size_t> out;
  for (std::size_t cell = 0; cell < mask.flags.size(); ++cell) {
    if (mask.flags[cell]) continue;
    for (std::size_t c = 0; c < cfg.video_channels; ++c) out.push_back(cell * cfg.video_channels + c);
  }
  return out;
}

Outcome spatial_routing() {
  const ModelConfig cfg = micro_config(2);
  const Model m = random_model(cfg, 202);
  Rng rng(202);
  const StreamState s = random_state(cfg, rng);
  const ConditionBundle c = random_bundle(cfg, rng);
  const auto coords = unmasked_coords(cfg, c.mask);
  const Prediction base = predict(m, s, c);
  std::size_t changed = 0;
  // Perturb each audio token in turn.
  for (std::size_t tok = 0; tok < cfg.layout.audio_tokens; ++tok) {
    std::vector<double> a(s.audio.data().begin(), s.audio.data().end());
    for (std::size_t ch = 0; ch < cfg.audio_channels; ++ch) a[tok * cfg.audio_channels + ch] += rng.normal();
    StreamState s2 = s;
    s2.audio = Tensor::from(s.audio.shape(), a);
    const Prediction p = predict(m, s2, c);
    for (std::size_t i : coords) changed += p.video[i] != base.video[i];
  }
  ScalarFn f = [&](Graph& g, const Tensor& audio) {
    StreamState st = s;
    st.audio = audio;
    const Prediction p = forward(g, m, st, c);
    return g.sum(g.gather_rows(g.reshape(p.video, {p.video.size(), 1}), coords));
  };
  double worst = 0.0;
  for (double v : numeric_gradient(f, s.audio, 1e-5)) worst = std::max(worst, std::abs(v));
  return {changed == 0 && worst <= 1e-10,
          fmt("%zu changed unmasked coordinates, max |FD derivative| %.3g", changed, worst)};
}

// --- 3 ---------------------------------------------------------------------

Outcome asymmetric_detach() {
  std::size_t nonzero = 0, audio_params = 0;
  for (std::size_t blocks : {1u, 2u}) {
    const ModelConfig cfg = micro_config(blocks);
    Model m = random_model(cfg, 300 + blocks);
    Rng rng(300 + blocks);
    const StreamState s = random_state(cfg, rng);
    const ConditionBundle c = random_bundle(cfg, rng);
    const Tensor target = random_tensor(s.audio.shape(), rng);
    Graph g;
    g.backward(g.mean_square(forward(g, m, s, c).audio, target));
    for (auto& [name, t] : m.parameters()) {
      if (name.rfind("video.", 0) == 0) {
        for (double v : t.grad()) nonzero += v != 0.0;
      } else if (t.has_grad()) {
        ++audio_params;
      }
    }
  }
  return {nonzero == 0 && audio_params > 0,
          fmt("%zu non-zero video-parameter gradient entries; %zu audio parameters received gradient", nonzero,
              audio_params)};
}

// --- 4 ---------------------------------------------------------------------

std::vector<EncodedScene> encode_range(const WorldParams& w, std::uint64_t global, std::size_t first,
                                       std::size_t count) {
  std::vector<EncodedScene> out;
  for (std::size_t i = first; i < first + count; ++i) out.push_back(encode_scene(generate_scene(derive_seed(global, i), w), w));
  return out;
}

Outcome zero_init_neutrality() {
  TrainConfig tc;
  tc.steps = 500;
  tc.seed = 404;
  Model m = init_model(tc.model, 404);
  const auto scenes = encode_range(tc.world, 404, 0, 50);
  Rng rng(405);
  const ConditionBundle c = scene_condition(scenes[0], tc.model, tc.world);
  const StreamState s = random_state(tc.model, rng, 0.5, 0.5);
  auto differs = [&] {
    const Prediction on = predict(m, s, c), off = predict(m, s, c, {.skip_context = true});
    return !bit_equal(on.video, off.video) || !bit_equal(on.audio, off.audio);
  };
  const bool fresh_differs = differs();
  train_loop(m, scenes, tc);
  const bool trained_differs = differs();
  return {!fresh_differs && trained_differs,
          fmt("fresh: toggle %s; after 500 steps: toggle %s", fresh_differs ? "changes outputs" : "bit-identical",
              trained_differs ? "changes outputs" : "bit-identical")};
}

// --- 5 ---------------------------------------------------------------------

Outcome guidance_algebra() {
  CodecConfig codec;
  codec.frames = 2;
  codec.height = 4;
  codec.width = 4;
  codec.window = 500;
  const Anchors anchors = make_anchors(codec);
  const ModelConfig cfg = micro_config(2);
  const Model m = random_model(cfg, 505);
  Rng rng(505);
  const StreamState s = random_state(cfg, rng, 0.6, 0.6);
  const ConditionBundle c = random_bundle(cfg, rng);
  const PredictFn pf = model_predictor(m);
  ConditionBundle null_ctx = c;
  null_ctx.base_audio.reset();
  const Prediction joint = pf(s, c, {}), ctx = pf(s, null_ctx, {.skip_context = true});
  StreamState sa = s, sv = s;
  sa.audio = anchors.muted_model;
  sa.t_audio = 0.0;
  sv.video = anchors.static_model;
  sv.t_video = 0.0;
  const Prediction adrv = pf(sa, c, {}), vdrv = pf(sv, c, {});
  double worst = 0.0;
  bool exact_at_one = true;
  auto check = [&](const Tensor& got, const Tensor& base, const Tensor& full, double scale) {
    for (std::size_t i = 0; i < got.size(); ++i) {
      worst = std::max(worst, std::abs(got[i] - (base[i] + scale * (full[i] - base[i]))));
    }
    if (scale == 1.0) exact_at_one = exact_at_one && bit_equal(got, full);
  };
  for (double scale : {0.0, 1.0, 2.0}) {
    const Prediction g1 = guide_stage1(pf, s, c, scale);
    check(g1.video, ctx.video, joint.video, scale);
    check(g1.audio, ctx.audio, joint.audio, scale);
    const Prediction g2 = guide_stage2(pf, s, c, anchors, scale, scale);
    check(g2.video, adrv.video, joint.video, scale);
    check(g2.audio, vdrv.audio, joint.audio, scale);
  }
  return {worst <= 1e-12 && exact_at_one,
          fmt("max deviation %.3g; s=1 %s the joint branch", worst, exact_at_one ? "reproduces exactly" : "differs from")};
}

// --- 6 ---------------------------------------------------------------------

Outcome pass_accounting() {
  const Shape video{2, 2, 2, 4}, audio{4, 8};
  CodecConfig codec;
  codec.frames = 2;
  codec.height = 4;
  codec.width = 4;
  codec.window = 500;
  const Anchors anchors = make_anchors(codec);
  std::size_t calls = 0;
  const PredictFn counter = [&](const StreamState& st, const ConditionBundle&, ForwardFlags) {
    ++calls;
    return Prediction{Tensor::zeros(st.video.shape()), Tensor::zeros(st.audio.shape())};
  };
  const SampleResult d = sample(counter, ConditionBundle{}, GuidanceConfig{}, anchors, video, audio, 1);
  bool ok = d.accounting.total == 140 && calls == 140;
  Rng rng(606);
  std::size_t bad = 0;
  for (int c = 0; c < 20; ++c) {
    GuidanceConfig g;
    g.steps = static_cast<std::size_t>(rng.integer(1, 80));
    g.tau = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(g.steps)));
    calls = 0;
    const SampleResult r = sample(counter, ConditionBundle{}, g, anchors, video, audio, 2);
    const std::size_t expected = 2 * g.tau + 3 * (g.steps - g.tau);
    if (r.accounting.total != expected || calls != expected) ++bad;
    for (std::size_t i = 0; i < g.steps; ++i) bad += r.accounting.stage[i] != (i < g.tau ? 1 : 2);
  }
  ok = ok && bad == 0;
  return {ok, fmt("T=50, tau=10: %zu forwards; %zu mismatches over 20 (tau, T) pairs", d.accounting.total, bad)};
}

// --- 7 ---------------------------------------------------------------------

double chi2_sf_df3(double x) {
  return std::erfc(std::sqrt(x / 2)) + std::sqrt(2 * x / std::numbers::pi) * std::exp(-x / 2);
}

Outcome router_statistics() {
  const ModeRouterConfig router;
  Rng rng(707);
  std::array<double, 4> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample_mode(rng, router))] += 1;
  double chi2 = 0.0;
  const auto p = router.probabilities();
  for (std::size_t k = 0; k < 4; ++k) chi2 += std::pow(counts[k] - n * p[k], 2) / (n * p[k]);
  const double pvalue = chi2_sf_df3(chi2);

  PixelMask mask = PixelMask::empty(1, 64, 64);
  for (std::size_t y = 28; y < 36; ++y) {
    for (std::size_t x = 28; x < 36; ++x) mask.set(0, y, x, true);
  }
  int bbox = 0;
  std::size_t max_dilation = 0;
  bool superset = true;
  for (int i = 0; i < n; ++i) {
    const AugmentedMask a = augment_mask(mask, rng);
    bbox += a.bbox;
    for (std::size_t d : a.dilation) max_dilation = std::max(max_dilation, d);
    for (std::size_t k = 0; k < mask.flags.size(); ++k) superset = superset && (!mask.flags[k] || a.mask.flags[k]);
  }
  const double freq = double(bbox) / n;
  return {pvalue > 0.01 && std::abs(freq - 0.30) <= 0.02 && max_dilation <= 20 && superset,
          fmt("chi2 %.3f (p %.3f); bbox frequency %.4f; max dilation %zu px", chi2, pvalue, freq, max_dilation)};
}

// --- 8 ---------------------------------------------------------------------

Outcome gradient_check() {
  const ModelConfig cfg = micro_config(1);
  Model m = random_model(cfg, 808);
  Rng rng(808);
  const StreamState s = random_state(cfg, rng, 0.37, 0.37);
  const ConditionBundle c = random_bundle(cfg, rng);
  const Tensor tv = random_tensor(s.video.shape(), rng), ta = random_tensor(s.audio.shape(), rng);
  LossFn loss = [&](Graph& g) {
    const Prediction p = forward(g, m, s, c);
    return g.add(g.mean_square(p.video, tv), g.mean_square(p.audio, ta));
  };
  double worst = 0.0;
  std::string worst_name;
  std::size_t count = 0;
  for (auto& [name, t] : m.parameters()) {
    const double e = finite_diff_check_leaf(loss, t, 1e-3);
    count += t.size();
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  }
  return {worst < 1e-4, fmt("%zu parameters checked, max relative error %.3g (%s)", count, worst, worst_name.c_str())};
}

// --- 9 ---------------------------------------------------------------------

Outcome sampler_exactness() {
  const Shape video{8, 8, 8, 4}, audio{32, 8};
  Rng rng(909);
  const Tensor z0v = random_tensor(video, rng), z0a = random_tensor(audio, rng);
  Rng noise(910);
  const Tensor ev = Tensor::from(video, noise.normals(numel(video)));
  const Tensor ea = Tensor::from(audio, noise.normals(numel(audio)));
  auto diff = [](const Tensor& a, const Tensor& b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return Tensor::from(a.shape(), out);
  };
  const Prediction velocity{diff(ev, z0v), diff(ea, z0a)};
  const PredictFn oracle = [&](const StreamState&, const ConditionBundle&, ForwardFlags) { return velocity; };
  const SampleResult r = sample(oracle, ConditionBundle{}, GuidanceConfig{}, make_anchors(CodecConfig{}), video, audio, 910);
  const double err = std::max(max_abs_diff(r.video, z0v), max_abs_diff(r.audio, z0a));
  return {err <= 1e-6, fmt("max abs error %.3g after 50 Euler steps", err)};
}

// --- 10 --------------------------------------------------------------------

Outcome ctx_f1_oracle() {
  using Intervals = std::vector<std::pair<double, double>>;
  auto oracle = [](const Intervals& gen, const Intervals& prot, const Intervals& ref) {
    auto in = [](const Intervals& iv, double t) {
      return std::any_of(iv.begin(), iv.end(), [t](const auto& p) { return t >= p.first && t < p.second; });
    };
    double g = 0, gp = 0, r = 0, gr = 0;
    for (int k = 0; k < 2000; ++k) {
      const double t = (k + 0.5) * 1e-3;
      const bool ig = in(gen, t), ip = in(prot, t), ir = in(ref, t);
      g += ig;
      gp += ig && ip;
      r += ir;
      gr += ig && ir;
    }
    const double prec = g > 0 ? 1 - gp / g : 1, rec = r > 0 ? gr / r : 1;
    return std::array<double, 3>{prec, rec, prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0};
  };
  Rng rng(1010);
  auto random_set = [&] {
    Intervals iv;
    for (int i = 0, n = int(rng.integer(0, 5)); i < n; ++i) {
      const auto a = rng.integer(0, 1990), len = rng.integer(1, 400);
      iv.emplace_back(a * 1e-3, std::min<std::int64_t>(a + len, 2000) * 1e-3);
    }
    return iv;
  };
  std::vector<std::array<Intervals, 3>> cases{{Intervals{{0, 1}}, Intervals{{0.5, 1}}, Intervals{{0, 1}}}};
  while (cases.size() < 1000) cases.push_back({random_set(), random_set(), random_set()});
  double worst = 0.0;
  for (const auto& [g, p, r] : cases) {
    const CtxF1 fast = ctx_f1(IntervalSet(g), IntervalSet(p), IntervalSet(r));
    const auto slow = oracle(g, p, r);
    worst = std::max({worst, std::abs(fast.precision - slow[0]), std::abs(fast.recall - slow[1]),
                      std::abs(fast.f1 - slow[2])});
  }
  const CtxF1 ex = ctx_f1(IntervalSet({{0, 1}}), IntervalSet({{0.5, 1}}), IntervalSet({{0, 1}}));
  const bool worked = std::abs(ex.precision - 0.5) < 1e-12 && std::abs(ex.recall - 1.0) < 1e-12 &&
                      std::abs(ex.f1 - 2.0 / 3.0) < 1e-12;
  return {worst <= 1e-6 && worked, fmt("1000 cases, max deviation %.3g; worked example (%.3f, %.3f, %.4f)", worst,
                                       ex.precision, ex.recall, ex.f1)};
}

// --- 11 --------------------------------------------------------------------

constexpr std::uint64_t kReferenceSeed = 2024;
constexpr std::size_t kTrainScenes = 200;
constexpr std::size_t kHeldOut = 20;

Outcome toy_reproduction() {
  TrainConfig tc;
  tc.seed = kReferenceSeed;
  const WorldParams& world = tc.world;
  const auto train = encode_range(world, kReferenceSeed, 0, kTrainScenes);
  Model m = init_model(tc.model, kReferenceSeed);
  const TrainResult tr = train_loop(m, train, tc);
  const double first = mean_loss(tr.curve, 1, 50), last = mean_loss(tr.curve, tc.steps - 49, tc.steps);
  const bool a = last <= 0.5 * first;

  const Anchors anchors = make_anchors(world.codec);
  const GuidanceConfig sptg;
  GuidanceConfig joint = sptg;
  joint.joint_only = true;
  std::size_t synced = 0, dominant = 0;
  double f1_sptg = 0.0, f1_joint = 0.0;
  std::ostringstream per_scene;
  for (std::size_t i = 0; i < kHeldOut; ++i) {
    const std::size_t index = kTrainScenes + i;
    const Scene scene = generate_scene(derive_seed(kReferenceSeed, index), world);
    const EncodedScene enc = encode_scene(scene, world);
    const ConditionBundle cond = scene_condition(enc, tc.model, world);
    const std::uint64_t seed = derive_seed(kReferenceSeed + 1, index);

    const SampleResult rs = sample(m, cond, sptg, anchors, seed);
    const SampleEvaluation es = evaluate_sample(scene, rs.video, rs.audio, world);
    const bool sync_ok = es.report.sync_defined && es.report.sync.score > 0.0 && std::abs(es.report.sync.lag) <= 1;
    synced += sync_ok;
    f1_sptg += es.report.ctx.f1;

    const SampleResult rj = sample(m, cond, joint, anchors, seed);
    const SampleEvaluation ej = evaluate_sample(scene, rj.video, rj.audio, world);
    f1_joint += ej.report.ctx.f1;

    const std::size_t band = edit_band(scene, seed);
    const SampleResult re = sample(m, with_band(cond, band), sptg, anchors, seed);
    const SampleEvaluation ee = evaluate_sample(scene, re.video, re.audio, world, band);
    dominant += ee.report.band.dominant;

    per_scene << fmt("    scene %zu: lag %+d score %.2f%s | f1 sptg %.3f joint %.3f | band %zu->%zu %s (margin %+.3f)\n",
                     index, es.report.sync.lag, es.report.sync.score, es.report.sync_defined ? "" : " (undefined)",
                     es.report.ctx.f1, ej.report.ctx.f1, scene.band, band, ee.report.band.dominant ? "dominant" : "not dominant",
                     ee.report.band.margin);
  }
  f1_sptg /= kHeldOut;
  f1_joint /= kHeldOut;
  const bool b = synced * 10 >= kHeldOut * 7;
  const bool c = dominant * 10 >= kHeldOut * 7;
  const bool d = f1_sptg >= f1_joint;
  std::fputs(per_scene.str().c_str(), stdout);
  return {a && b && c && d,
          fmt("(a) loss %.4f -> %.4f (ratio %.3f) %s; (b) synced %zu/%zu %s; (c) band dominant %zu/%zu %s; "
              "(d) ctx_f1 sptg %.3f vs joint %.3f %s",
              first, last, last / first, a ? "ok" : "FAIL", synced, kHeldOut, b ? "ok" : "FAIL", dominant, kHeldOut,
              c ? "ok" : "FAIL", f1_sptg, f1_joint, d ? "ok" : "FAIL")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace avedit

int main(int argc, char** argv) {
  using namespace avedit;
  const std::vector<Criterion> criteria{
      {1, "RoPE conformance", 1, rope_conformance},
      {2, "Spatial routing leakage", 60, spatial_routing},
      {3, "Asymmetric detach", 60, asymmetric_detach},
      {4, "Zero-init neutrality", 300, zero_init_neutrality},
      {5, "Guidance algebra", 60, guidance_algebra},
      {6, "Pass accounting", 60, pass_accounting},
      {7, "Mode-router statistics", 60, router_statistics},
      {8, "Gradient correctness", 600, gradient_check},
      {9, "Sampler exactness", 60, sampler_exactness},
      {10, "Ctx-F1 oracle equivalence", 60, ctx_f1_oracle},
      {11, "Toy end-to-end reproduction", 2700, toy_reproduction},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s [%d] %s: %s; %.2f s (budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                secs, c.budget_seconds, in_time ? "" : ", exceeded");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
