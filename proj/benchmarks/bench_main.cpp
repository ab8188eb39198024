#include <benchmark/benchmark.h>

#include "avedit/pipeline.hpp"
#include "avedit/random.hpp"
#include "avedit/rope.hpp"
#include "avedit/training.hpp"

namespace {

using namespace avedit;

struct Fixture {
  TrainConfig config;
  Scene scene;
  EncodedScene encoded;
  ConditionBundle cond;
  Model model;

  Fixture()
      : scene(generate_scene(1, config.world)),
        encoded(encode_scene(scene, config.world)),
        cond(scene_condition(encoded, config.model, config.world)),
        model(init_model(config.model, 1)) {}

  StreamState state() const { return {encoded.video, encoded.target_audio, 0.5, 0.5}; }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_AssignPositions(benchmark::State& state) {
  SequenceLayout l;
  l.frames = static_cast<std::size_t>(state.range(0));
  l.audio_tokens = 4 * l.frames;
  for (auto _ : state) benchmark::DoNotOptimize(assign_positions(l));
}
BENCHMARK(BM_AssignPositions)->Arg(8)->Arg(64);

void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  auto rand = [&](Shape s) { return Tensor::from(s, rng.normals(numel(s))); };
  const Tensor q = rand({n, 64}), k = rand({n, 64}), v = rand({n, 64});
  for (auto _ : state) {
    Graph g(Graph::Mode::kInference);
    benchmark::DoNotOptimize(g.attention(q, k, v, 4));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Attention)->RangeMultiplier(2)->Range(64, 512)->Complexity();

void BM_Predict(benchmark::State& state) {
  const auto& f = fixture();
  const StreamState s = f.state();
  for (auto _ : state) benchmark::DoNotOptimize(predict(f.model, s, f.cond));
}
BENCHMARK(BM_Predict)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto& f = fixture();
  Model m = f.model.clone();
  Adam adam(m, f.config.optimizer);
  Rng rng(5);
  for (auto _ : state) {
    const TrainBatch b = make_batch(f.encoded, TrainMode::kJoint, rng, f.config.router);
    Graph g;
    g.backward(compute_loss(g, m, b));
    adam.step(1e-4);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_GuidedStep(benchmark::State& state) {
  const auto& f = fixture();
  const PredictFn pf = model_predictor(f.model);
  const Anchors anchors = make_anchors(f.config.world.codec);
  const StreamState s = f.state();
  const bool stage2 = state.range(0) == 2;
  for (auto _ : state) {
    if (stage2) {
      benchmark::DoNotOptimize(guide_stage2(pf, s, f.cond, anchors, 5.0, 5.0));
    } else {
      benchmark::DoNotOptimize(guide_stage1(pf, s, f.cond, 5.0));
    }
  }
}
BENCHMARK(BM_GuidedStep)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_GenerateAndEncode(benchmark::State& state) {
  const WorldParams p;
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(encode_scene(generate_scene(seed++, p), p));
}
BENCHMARK(BM_GenerateAndEncode)->Unit(benchmark::kMicrosecond);

void BM_CtxF1(benchmark::State& state) {
  Rng rng(9);
  std::vector<std::pair<double, double>> a, b, c;
  for (int i = 0; i < state.range(0); ++i) {
    const double s = rng.uniform() * 100;
    a.emplace_back(s, s + rng.uniform());
    b.emplace_back(s + 0.5, s + 1.5 * rng.uniform() + 0.5);
    c.emplace_back(s + 0.2, s + 0.8);
  }
  const IntervalSet ga(a), gb(b), gc(c);
  for (auto _ : state) benchmark::DoNotOptimize(ctx_f1(ga, gb, gc));
}
BENCHMARK(BM_CtxF1)->Arg(16)->Arg(1024);

}  // namespace
BENCHMARK_MAIN();
