#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "avedit/io.hpp"
#include "support.hpp"

namespace avedit {
namespace {

namespace fs = std::filesystem;

TEST(ConfigJson, RoundTripDefaults) {
  EXPECT_TRUE(model_config_from_json(to_json(ModelConfig{})) == ModelConfig{});
  const TrainConfig t = train_config_from_json(to_json(TrainConfig{}));
  EXPECT_TRUE(t.model == ModelConfig{});
  EXPECT_EQ(t.steps, 2000u);
  EXPECT_EQ(t.augment.max_dilation, 2u);
  EXPECT_TRUE(t.world.codec == CodecConfig{});
  const GuidanceConfig g = guidance_config_from_json(to_json(GuidanceConfig{}));
  EXPECT_EQ(g.steps, 50u);
  EXPECT_EQ(g.tau, 10u);
  EXPECT_EQ(g.s_ctx, 5.0);
  EXPECT_TRUE(world_params_from_json(to_json(WorldParams{})).codec == CodecConfig{});
}

TEST(ConfigJson, PartialDocumentKeepsDefaults) {
  const TrainConfig t = train_config_from_json(R"({"steps": 10, "optimizer": {"lr": 0.002}})");
  EXPECT_EQ(t.steps, 10u);
  EXPECT_EQ(t.optimizer.lr, 0.002);
  EXPECT_EQ(t.optimizer.beta1, 0.9);
  EXPECT_EQ(t.router.p_joint, 0.4);
  const ModelConfig m = model_config_from_json(R"({"positions": "naive", "layout": {"frames": 4}})");
  EXPECT_EQ(m.positions, PositionScheme::kNaive);
  EXPECT_EQ(m.layout.frames, 4u);
  EXPECT_EQ(m.layout.audio_tokens, 32u);
}

TEST(ConfigJson, RejectsUnknownKeys) {
  EXPECT_THROW(train_config_from_json(R"({"stepz": 10})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"optimizer": {"momentum": 0.9}})"), ConfigError);
  EXPECT_THROW(guidance_config_from_json(R"({"tau": 10, "cfg": 1})"), ConfigError);
  try {
    model_config_from_json(R"({"layout": {"depth": 3}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("layout.depth"), std::string::npos);
  }
}

TEST(ConfigJson, RejectsBadTypesAndValues) {
  EXPECT_THROW(train_config_from_json(R"({"steps": "many"})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"steps": -1})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"steps": 1.5})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"router": {"p_joint": 0.9}})"), ConfigError);
  EXPECT_THROW(guidance_config_from_json(R"({"tau": 60})"), ConfigError);
  EXPECT_THROW(model_config_from_json(R"({"positions": "diagonal"})"), ConfigError);
  EXPECT_THROW(model_config_from_json("{not json"), ConfigError);
  EXPECT_THROW(model_config_from_json("[1, 2]"), ConfigError);
  // Integers are accepted where reals are expected.
  EXPECT_EQ(guidance_config_from_json(R"({"s_ctx": 3})").s_ctx, 3.0);
}

TEST(ConfigJson, Overrides) {
  const std::string doc = apply_overrides(to_json(TrainConfig{}), {"steps=7", "optimizer.lr=0.01", "model.positions=naive"});
  const TrainConfig t = train_config_from_json(doc);
  EXPECT_EQ(t.steps, 7u);
  EXPECT_EQ(t.optimizer.lr, 0.01);
  EXPECT_EQ(t.model.positions, PositionScheme::kNaive);
  EXPECT_THROW(apply_overrides(to_json(TrainConfig{}), {"optimizer.momentum=1"}), ConfigError);
  EXPECT_THROW(apply_overrides(to_json(TrainConfig{}), {"steps"}), ConfigError);
  EXPECT_THROW(apply_overrides(to_json(TrainConfig{}), {"steps.x=1"}), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelConfig cfg = testing::micro_config(2);
  Model m = testing::random_model(cfg, 17);
  const fs::path file = fs::temp_directory_path() / "avedit_io_ckpt.bin";
  save_checkpoint(m, file, 123);
  std::size_t step = 0;
  Model back = load_checkpoint(file, &step);
  EXPECT_EQ(step, 123u);
  EXPECT_TRUE(back.config == cfg);
  EXPECT_EQ(back.seed, 17u);
  auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(bit_equal(a[i].second, b[i].second)) << a[i].first;
  }
  Rng rng(1);
  const ConditionBundle cond = testing::random_bundle(cfg, rng);
  const StreamState s = testing::random_state(cfg, rng);
  EXPECT_EQ(max_abs_diff(predict(m, s, cond).video, predict(back, s, cond).video), 0.0);
  fs::remove(file);
}

TEST(Checkpoint, HeaderDescribesPayload) {
  Model m = init_model(testing::micro_config(), 3);
  const fs::path file = fs::temp_directory_path() / "avedit_io_header.bin";
  save_checkpoint(m, file);
  std::ifstream in(file, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "AVCKPT01");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(in.get())) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j["dtype"], "float64");
  const auto& params = j["parameters"];
  EXPECT_EQ(params.size(), m.parameters().size());
  const auto& last = params.back();
  const std::size_t end = last["offset"].get<std::size_t>() + m.parameters().back().second.size() * 8;
  EXPECT_EQ(fs::file_size(file), 16 + len + end);
  fs::remove(file);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const fs::path file = fs::temp_directory_path() / "avedit_io_bad.bin";
  Model m = init_model(testing::micro_config(), 3);
  save_checkpoint(m, file);
  const auto size = fs::file_size(file);
  fs::resize_file(file, size - 8);
  EXPECT_THROW(load_checkpoint(file), CheckpointError);
  {
    std::ofstream(file) << "garbage";
  }
  EXPECT_THROW(load_checkpoint(file), CheckpointError);
  fs::remove(file);
  EXPECT_THROW(load_checkpoint(file), CheckpointError);
}

}  // namespace
}  // namespace avedit
