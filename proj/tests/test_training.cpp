#include <cmath>
#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "coattn/training.hpp"

using namespace coattn;
namespace fs = std::filesystem;

namespace {

Dataset tiny_dataset(std::size_t count = 10) {
  DatasetSpec spec;
  spec.image_size = 16;
  spec.min_object = 4;
  spec.max_object = 6;
  spec.train_count = count;
  spec.test_count = 1;
  return generate(spec).train;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.pairs_per_epoch = 12;
  c.channels = {4, 8};
  c.lr_decay_every = 1;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "coattn_training_tests" / name;
  fs::remove_all(dir);
  return dir;
}

// Heavy-ball recurrence on f = ½x², written out independently of sgd_step.
double simulate_quadratic(double x, double lr, double mu, int steps) {
  double v = 0.0;
  for (int i = 0; i < steps; ++i) {
    v = mu * v + x;
    x = x - lr * v;
  }
  return x;
}

}  // namespace

TEST(Sgd, ZeroGradientsLeaveParamsUnchanged) {
  Tensor p = Tensor::matrix({{1.5, -2.0}});
  SgdState st;
  for (int i = 0; i < 3; ++i) sgd_step({&p}, {Tensor({1, 2}, 0.0)}, st, 0.1, 0.9, 0.0);
  EXPECT_EQ(p, Tensor::matrix({{1.5, -2.0}}));
}

TEST(Sgd, OneStepOnQuadratic) {
  Tensor x = Tensor::scalar(1.0);
  SgdState st;
  sgd_step({&x}, {x}, st, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(x.item(), 0.9);
}

TEST(Sgd, ConvergesOnQuadratic) {
  const double lr = 0.1, mu = 0.5;
  Tensor x = Tensor::scalar(1.0);
  SgdState st;
  for (int i = 0; i < 100; ++i) sgd_step({&x}, {x}, st, lr, mu, 0.0);
  EXPECT_LT(std::abs(x.item()), 1e-8);
  EXPECT_DOUBLE_EQ(x.item(), simulate_quadratic(1.0, lr, mu, 100));
}

TEST(Sgd, WeightDecayAndContracts) {
  Tensor x = Tensor::scalar(2.0);
  SgdState st;
  sgd_step({&x}, {Tensor::scalar(0.0)}, st, 0.5, 0.0, 0.1);
  EXPECT_DOUBLE_EQ(x.item(), 2.0 - 0.5 * 0.2);
  EXPECT_THROW(sgd_step({&x}, {}, st, 0.1, 0.9, 0.0), ContractError);
  EXPECT_THROW(sgd_step({&x}, {Tensor({2}, 0.0)}, st, 0.1, 0.9, 0.0), ContractError);
}

TEST(ClipGlobalNorm, RescalesOnlyAboveThreshold) {
  std::vector<Tensor> g{Tensor::scalar(3.0), Tensor::scalar(4.0)};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_EQ(g[0].item(), 3.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0].item(), 0.6, 1e-15);
  EXPECT_NEAR(g[1].item(), 0.8, 1e-15);
  std::vector<Tensor> h{Tensor::scalar(30.0)};
  clip_global_norm(h, 0.0);
  EXPECT_EQ(h[0].item(), 30.0);
}

TEST(TrainConfigFile, ParseDescribeRoundTrip) {
  std::istringstream is("epochs = 4\nlearning_rate = 0.05\nloss_contrast = false\nchannels = 8, 16\ngrad_clip = 0\n");
  const TrainConfig c = parse_train_config(is);
  EXPECT_EQ(c.epochs, 4u);
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.05);
  EXPECT_FALSE(c.terms.contrast);
  EXPECT_EQ(c.channels, (std::vector<std::size_t>{8, 16}));
  std::istringstream again(describe(c));
  EXPECT_EQ(describe(parse_train_config(again)), describe(c));

  std::istringstream unknown("epoch = 3\n");
  EXPECT_THROW(parse_train_config(unknown), ConfigError);
  std::istringstream negative("learning_rate = -1\n");
  EXPECT_THROW(parse_train_config(negative), ConfigError);
  std::istringstream garbage("momentum = fast\n");
  EXPECT_THROW(parse_train_config(garbage), ConfigError);
  EXPECT_THROW(parse_loss_arm("everything"), ConfigError);
}

TEST(TrainConfigFile, LearningRateSchedule) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.learning_rate_at(0), 0.01);
  EXPECT_DOUBLE_EQ(c.learning_rate_at(11), 0.01);
  EXPECT_NEAR(c.learning_rate_at(12), 0.001, 1e-18);
  EXPECT_NEAR(c.learning_rate_at(24), 0.0001, 1e-18);
}

TEST(Train, DeterministicUnderFixedSeed) {
  const Dataset d = tiny_dataset();
  const auto a = train(d, tiny_config()), b = train(d, tiny_config());
  ASSERT_EQ(a.log.size(), 2u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(metrics_csv_row(a.log[i]), metrics_csv_row(b.log[i]));
  EXPECT_EQ(named_copy(a.params), named_copy(b.params));
  for (const auto& m : a.log) EXPECT_TRUE(std::isfinite(m.loss_total));
}

TEST(Train, AllTermsOffLeavesParamsUnchanged) {
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.terms = {false, false, false};
  c.weight_decay = 0.0;
  const auto r = train(d, c);
  EXPECT_EQ(named_copy(r.params), named_copy(initial_state(d, c).params));
  EXPECT_EQ(r.log.back().loss_total, 0.0);
}

TEST(Train, BasicArmDoesNotTouchCoattentionParams) {
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.terms = parse_loss_arm("basic");
  c.weight_decay = 0.0;
  const auto r = train(d, c);
  const ModelParams init = initial_state(d, c).params;
  EXPECT_EQ(r.params.gate.weight, init.gate.weight);
  EXPECT_EQ(r.params.affinity.by_pair, init.affinity.by_pair);
  EXPECT_NE(r.params.classifier.weight, init.classifier.weight);
}

TEST(Train, AblationArmsMatchIndividualRuns) {
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.epochs = 1;
  const auto arms = ablation_suite(d, c);
  ASSERT_EQ(arms.size(), 3u);
  c.terms = {true, true, false};
  EXPECT_EQ(named_copy(train(d, c).params), named_copy(arms[1].params));
  EXPECT_NE(named_copy(arms[0].params), named_copy(arms[2].params));
}

TEST(Train, ResumeFromEpochCheckpointIsBitIdentical) {
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.epochs = 3;
  c.checkpoint_every = 1;
  const fs::path dir = fresh_dir("resume");
  TrainHooks hooks;
  hooks.checkpoint_dir = dir.string();
  const auto full = train(d, c, hooks);
  ASSERT_TRUE(fs::exists(dir / "epoch_1.ckpt"));
  ASSERT_TRUE(fs::exists(dir / "final.ckpt"));

  TrainState st = load_train_state((dir / "epoch_1.ckpt").string());
  EXPECT_EQ(st.next_epoch, 1u);
  EXPECT_FALSE(st.optimizer.velocity.empty());
  const auto resumed = train_from(d, c, st);
  ASSERT_EQ(resumed.log.size(), 2u);
  EXPECT_EQ(metrics_csv_row(resumed.log.back()), metrics_csv_row(full.log.back()));
  EXPECT_EQ(named_copy(resumed.params), named_copy(full.params));
  EXPECT_EQ(named_copy(load_checkpoint((dir / "final.ckpt").string())), named_copy(full.params));
}

TEST(Train, DivergenceSavesLastGoodState) {
  const Dataset d = tiny_dataset();
  TrainConfig c = tiny_config();
  c.learning_rate = 1e150;
  c.grad_clip = 0.0;
  const fs::path dir = fresh_dir("diverge");
  TrainHooks hooks;
  hooks.checkpoint_dir = dir.string();
  EXPECT_THROW(train(d, c, hooks), DivergenceError);
  ASSERT_TRUE(fs::exists(dir / "last_good.ckpt"));
  for (const auto& [name, t] : named_copy(load_train_state((dir / "last_good.ckpt").string()).params))
    EXPECT_TRUE(t.all_finite()) << name;
}

TEST(Train, RejectsUnusableData) {
  Dataset d = tiny_dataset(2);
  d.samples.resize(1);
  EXPECT_THROW(train(d, tiny_config()), SamplingError);
}

TEST(Metrics, CsvLayout) {
  EXPECT_EQ(metrics_csv_header(), "epoch,loss_basic,loss_coatt,loss_contrast,loss_total,f1");
  EpochMetrics m;
  m.epoch = 3;
  m.loss_total = 0.5;
  EXPECT_EQ(metrics_csv_row(m), "3,0,0,0,0.5,0");
}
