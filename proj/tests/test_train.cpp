#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "plunet/train.hpp"

using namespace plunet;
using namespace plunet::train;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("plunet_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ArchConfig tiny_arch() {
  ArchConfig a = ArchConfig::preset("plunet");
  a.depth = 2;
  a.widths = {16, 32};
  a.bottleneck_width = 32;
  return a;
}

TrainConfig tiny_config(const fs::path& out) {
  TrainConfig c;
  c.arch = tiny_arch();
  c.epochs = 2;
  c.batch_size = 2;
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p(Shape{1, 1, 1, 3}, std::vector<double>{1.0, -2.0, 0.5});
  const Tensor<double> g(Shape{1, 1, 1, 3}, std::vector<double>{1.0, -0.1, 0.0});
  Tensor<double> m(p.shape()), v(p.shape());
  const auto before = p;
  adam_update(p, g, m, v, 1, AdamConfig{});
  EXPECT_NEAR(p[0] - before[0], -2.99999997e-4, 1e-15);
  EXPECT_NEAR(p[1] - before[1], 2.9999997e-4, 1e-15);
  EXPECT_EQ(p[2], before[2]);
  // Bias-corrected first moment equals the gradient at t = 1.
  EXPECT_NEAR(m[0] / (1.0 - 0.5), g[0], 1e-17);
  EXPECT_NEAR(v[0] / (1.0 - 0.999), g[0] * g[0], 1e-17);
}

TEST(Adam, StepCreatesStateAndSkipsMissingGradients) {
  nn::ParamStore<float> store;
  store.add_param("a", Tensor<float>(Shape{1, 1, 1, 2}, 1.0f));
  store.add_param("b", Tensor<float>(Shape{1, 1, 1, 2}, 1.0f));
  AdamState<float> st;
  std::map<std::string, Tensor<float>> grads{{"a", Tensor<float>(Shape{1, 1, 1, 2}, 1.0f)}};
  adam_step(store, grads, st, AdamConfig{});
  EXPECT_EQ(st.step, 1);
  EXPECT_TRUE(st.m.count("a"));
  EXPECT_EQ(store.param("b").vec(), (std::vector<float>{1.0f, 1.0f}));
  EXPECT_LT(store.param("a")[0], 1.0f);
  AdamConfig bad;
  bad.beta1 = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Training, LossFallsOnAFixedBatch) {
  const ModelGraph model(tiny_arch());
  auto params = model.init_params<float>(1);
  const auto samples = data::synth_generate(2, 32, 32, 3);
  const std::vector<std::size_t> idx{0, 1};
  const auto x = data::batch_images(samples, idx);
  const auto y = data::batch_masks(samples, idx);
  AdamState<float> st;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  std::vector<double> losses;
  for (int i = 0; i < 5; ++i) {
    GradTape<float> tape;
    nn::Context<float> ctx{tape, params, nn::Mode::train};
    const auto loss = metrics::ad::bce_with_logits(tape, model.forward_logits(ctx, tape.constant(x)), y);
    losses.push_back(loss.value()[0]);
    tape.backward(loss);
    adam_step(params, tape.parameter_grads(), st, cfg);
  }
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Training, StepsPerEpochAndOutputs) {
  const auto dir = fresh_dir("steps");
  auto cfg = tiny_config(dir);
  cfg.epochs = 1;
  const auto samples = data::synth_generate(10, 32, 32, 4);
  const std::vector<data::Sample> train(samples.begin(), samples.begin() + 8);
  const std::vector<data::Sample> val(samples.begin() + 8, samples.end());
  const auto r = run(cfg, train, val);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.history[0].step, 4);
  EXPECT_TRUE(r.history[0].val.has_value());
  EXPECT_TRUE(fs::exists(dir / "last.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  const auto line = nlohmann::json::parse(slurp(dir / "log.jsonl"));
  EXPECT_EQ(line.at("epoch"), 1);
  EXPECT_EQ(line.at("step"), 4);
  for (const char* k : {"pc", "se", "f1", "js"}) EXPECT_TRUE(line.at("val").contains(k)) << k;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = fresh_dir("ckpt");
  auto cfg = tiny_config(dir);
  cfg.epochs = 1;
  const auto samples = data::synth_generate(4, 32, 32, 5);
  run(cfg, samples, {});
  const auto ck = Checkpoint::load(dir / "last.ckpt");
  EXPECT_EQ(ck.epoch, 1);
  EXPECT_EQ(ck.adam.step, 2);
  EXPECT_EQ(ck.arch, cfg.arch);
  EXPECT_FALSE(ck.train_config.contains("out_dir"));
  ck.save(dir / "again.ckpt");
  EXPECT_EQ(slurp(dir / "last.ckpt"), slurp(dir / "again.ckpt"));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = fresh_dir("corrupt");
  std::ofstream(dir / "junk.ckpt") << "PLUWgarbage";
  EXPECT_THROW(Checkpoint::load(dir / "junk.ckpt"), std::runtime_error);
  EXPECT_THROW(Checkpoint::load(dir / "absent.ckpt"), std::runtime_error);
}

TEST(Training, ResumeIsBitExact) {
  const auto samples = data::synth_generate(8, 32, 32, 6);
  const std::vector<data::Sample> train(samples.begin(), samples.begin() + 6);
  const std::vector<data::Sample> val(samples.begin() + 6, samples.end());

  const auto straight = fresh_dir("straight");
  run(tiny_config(straight), train, val);

  const auto resumed = fresh_dir("resumed");
  TrainOptions first;
  first.stop_after = 1;
  run(tiny_config(resumed), train, val, first);
  TrainOptions second;
  second.resume = resumed / "last.ckpt";
  run(tiny_config(resumed), train, val, second);

  EXPECT_EQ(slurp(straight / "last.ckpt"), slurp(resumed / "last.ckpt"));
  EXPECT_EQ(slurp(straight / "log.jsonl"), slurp(resumed / "log.jsonl"));
}

TEST(Evaluate, ErrorsOnEmptyOrMismatchedInput) {
  ArchConfig gray = tiny_arch();
  gray.in_channels = 1;
  const ModelGraph model(gray);
  auto params = model.init_params<float>(1);
  EXPECT_THROW(evaluate(model, params, {}), std::invalid_argument);
  EXPECT_THROW(evaluate(model, params, data::synth_generate(2, 32, 32, 1)), std::invalid_argument);
}

TEST(Config, JsonRulesAndPresetShorthand) {
  auto j = nlohmann::json::parse(R"({"arch": "plunet", "epochs": 3, "batch_size": 4})");
  const auto c = TrainConfig::from_json(j);
  EXPECT_EQ(c.arch, ArchConfig::preset("plunet"));
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.adam.lr, 3e-4);
  EXPECT_EQ(c.adam.beta1, 0.5);
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  j["learning_rate"] = 0.1;
  EXPECT_THROW(TrainConfig::from_json(j), std::invalid_argument);
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
