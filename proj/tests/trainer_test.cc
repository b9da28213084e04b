#include "ldesfl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "gtest/gtest.h"

namespace {

using ldesfl::LabeledSet;
using ldesfl::LossKind;
using ldesfl::Matrix;
using ldesfl::Model;
using ldesfl::ModelParams;
using ldesfl::Vector;

LabeledSet random_set(std::mt19937_64 &rng, int n, int d, LossKind loss) {
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledSet set;
  for (int i = 0; i < n; ++i) {
    ldesfl::Sample s;
    s.id = i;
    s.x = Vector(d);
    for (int j = 0; j < d; ++j) s.x[j] = normal(rng);
    s.y = loss == LossKind::mse ? normal(rng) : (normal(rng) > 0 ? 1.0 : 0.0);
    set.samples.push_back(std::move(s));
  }
  return set;
}

Matrix random_matrix(std::mt19937_64 &rng, int rows, int cols, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

struct Instance {
  Model model = Model::dense(LossKind::mse);
  ModelParams params;
  LabeledSet data;
};

// Dense, single-layer low-rank and two-layer low-rank models.
Instance make_instance(std::mt19937_64 &rng, bool low_rank, int layers,
                       LossKind loss) {
  std::uniform_int_distribution<int> dim(2, 7);
  const int d = dim(rng);
  Instance inst;
  inst.data = random_set(rng, 5, d, loss);
  if (!low_rank) {
    inst.model = Model::dense(loss);
    inst.params = ModelParams::dense(random_matrix(rng, d, 1, 0.7).col(0));
    return inst;
  }
  std::uniform_int_distribution<int> r(1, 3);
  const int rank = r(rng);
  std::vector<int> dims = {d};
  for (int l = 1; l < layers; ++l) dims.push_back(dim(rng));
  dims.push_back(1);
  ldesfl::FrozenBase base;
  std::vector<ModelParams::Factors> factors;
  for (int l = 0; l < layers; ++l) {
    base.weights.push_back(random_matrix(rng, dims[l + 1], dims[l], 0.5));
    factors.push_back({random_matrix(rng, rank, dims[l], 0.5),
                       random_matrix(rng, dims[l + 1], rank, 0.5)});
  }
  inst.model = Model::low_rank(loss, std::move(base));
  inst.params = ModelParams::low_rank(factors);
  return inst;
}

// Independent central-difference oracle on the flat parameter buffer.
Vector numeric_gradient(const Instance &inst, std::span<const std::size_t> idx,
                        double h) {
  Vector g(inst.params.size());
  for (ldesfl::Index i = 0; i < g.size(); ++i) {
    Vector plus = inst.params.flat(), minus = inst.params.flat();
    plus[i] += h;
    minus[i] -= h;
    const double fp = inst.model.loss_and_gradient(
        inst.params.with_values(plus), inst.data, idx, nullptr);
    const double fm = inst.model.loss_and_gradient(
        inst.params.with_values(minus), inst.data, idx, nullptr);
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct GradCase {
  bool low_rank;
  int layers;
  LossKind loss;
};

class GradientTest : public testing::TestWithParam<GradCase> {};

TEST_P(GradientTest, MatchesCentralDifferences) {
  const auto c = GetParam();
  std::mt19937_64 rng(1000 + c.layers * 10 + (c.low_rank ? 1 : 0) +
                      (c.loss == LossKind::mse ? 0 : 100));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = make_instance(rng, c.low_rank, c.layers, c.loss);
    std::vector<std::size_t> idx(inst.data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Vector analytic;
    inst.model.loss_and_gradient(inst.params, inst.data, idx, &analytic);
    const Vector numeric = numeric_gradient(inst, idx, 1e-6);
    const double rel = (analytic - numeric).norm() /
                       std::max({analytic.norm(), numeric.norm(), 1e-8});
    worst = std::max(worst, rel);
    ASSERT_LE(rel, 1e-4) << "trial " << trial;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(
    AllKinds, GradientTest,
    testing::Values(GradCase{false, 1, LossKind::mse},
                    GradCase{false, 1, LossKind::cross_entropy},
                    GradCase{true, 1, LossKind::mse},
                    GradCase{true, 1, LossKind::cross_entropy},
                    GradCase{true, 2, LossKind::mse},
                    GradCase{true, 2, LossKind::cross_entropy}));

TEST(ModelTest, LowRankOutputAddsTheAdapter) {
  ldesfl::FrozenBase base;
  base.weights.push_back(Matrix::Constant(1, 2, 1.0));
  const auto model = Model::low_rank(LossKind::mse, base);
  Matrix a(1, 2), b(1, 1);
  a << 2.0, 0.0;
  b << 3.0;
  Vector x(2);
  x << 1.0, 1.0;
  // (W0 + B A) x = (1 + 6) * 1 + (1 + 0) * 1.
  EXPECT_DOUBLE_EQ(model.output(ModelParams::low_rank({{a, b}}), x), 8.0);
}

TEST(ModelTest, CrossEntropyIsStableForLargeLogits) {
  const auto model = Model::dense(LossKind::cross_entropy);
  const auto [l1, g1] = model.pointwise(800.0, 0.0);
  EXPECT_DOUBLE_EQ(l1, 800.0);
  EXPECT_DOUBLE_EQ(g1, 1.0);
  const auto [l2, g2] = model.pointwise(-800.0, 0.0);
  EXPECT_DOUBLE_EQ(l2, 0.0);
  EXPECT_DOUBLE_EQ(g2, 0.0);
  EXPECT_NEAR(model.pointwise(0.0, 1.0).first, std::log(2.0), 1e-15);
}

TEST(ModelTest, CheckParamsRejectsMismatches) {
  const auto dense = Model::dense(LossKind::mse);
  EXPECT_NO_THROW(dense.check_params(ModelParams::dense(Vector::Zero(3)), 3));
  EXPECT_THROW(dense.check_params(ModelParams::dense(Vector::Zero(3)), 4),
               ldesfl::IncompatibleParamsError);
  ldesfl::FrozenBase base;
  base.weights.push_back(Matrix::Zero(1, 3));
  const auto lr = Model::low_rank(LossKind::mse, base);
  EXPECT_THROW(lr.check_params(ModelParams::dense(Vector::Zero(3)), 3),
               ldesfl::IncompatibleParamsError);
  EXPECT_NO_THROW(lr.check_params(
      ModelParams::low_rank({{Matrix::Zero(2, 3), Matrix::Zero(1, 2)}}), 3));
  EXPECT_THROW(lr.check_params(
                   ModelParams::low_rank({{Matrix::Zero(2, 4), Matrix::Zero(1, 2)}}), 4),
               ldesfl::IncompatibleParamsError);
}

TEST(ModelTest, BaseMustChainToOneOutput) {
  ldesfl::FrozenBase bad;
  bad.weights.push_back(Matrix::Zero(2, 3));
  EXPECT_THROW(Model::low_rank(LossKind::mse, bad), ldesfl::ConfigError);
  bad.weights.push_back(Matrix::Zero(1, 4));
  EXPECT_THROW(Model::low_rank(LossKind::mse, bad), ldesfl::ConfigError);
  EXPECT_THROW(Model::low_rank(LossKind::mse, {}), ldesfl::ConfigError);
}

TEST(BatchSamplerTest, EpochsArePermutations) {
  ldesfl::BatchSampler sampler(3, 1, 10);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::set<std::size_t> seen;
    for (int b = 0; b < 5; ++b) {
      for (auto i : sampler.next(2)) seen.insert(i);
    }
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(BatchSamplerTest, DependsOnlyOnSeedAndOwner) {
  ldesfl::BatchSampler a(3, 1, 50), b(3, 1, 50), c(3, 2, 50);
  const auto first = a.next(30);
  EXPECT_EQ(first, b.next(30));
  EXPECT_NE(first, c.next(30));
}

class LocalTrainTest : public testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(7);
    data_ = random_set(rng, 64, 4, LossKind::mse);
  }
  LabeledSet data_;
};

TEST_F(LocalTrainTest, TakesExactlyTheConfiguredSteps) {
  ldesfl::TrainConfig cfg;
  cfg.steps_per_round = 7;
  cfg.batch_size = 8;
  ldesfl::BatchSampler sampler(1, 0, data_.size());
  const auto r = ldesfl::local_train(Model::dense(LossKind::mse),
                                     ModelParams::dense(Vector::Zero(4)), data_,
                                     cfg, sampler);
  EXPECT_EQ(r.steps, 7);
}

TEST_F(LocalTrainTest, MatchesHandWrittenSgd) {
  ldesfl::TrainConfig cfg;
  cfg.steps_per_round = 5;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  cfg.grad_clip_norm = 0.5;
  const auto model = Model::dense(LossKind::mse);
  ldesfl::BatchSampler sampler(4, 2, data_.size()), replay(4, 2, data_.size());
  const auto r = ldesfl::local_train(model, ModelParams::dense(Vector::Zero(4)),
                                     data_, cfg, sampler);
  Vector w = Vector::Zero(4);
  for (int step = 0; step < 5; ++step) {
    Vector g = Vector::Zero(4);
    const auto idx = replay.next(8);
    for (auto i : idx) {
      const auto &s = data_.samples[i];
      g += 2.0 * (w.dot(s.x) - s.y) * s.x / 8.0;
    }
    if (g.norm() > 0.5) g *= 0.5 / g.norm();
    w -= 0.05 * g;
  }
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(r.params.flat()[i], w[i], 1e-12);
}

TEST_F(LocalTrainTest, DivergenceRaisesNumericError) {
  ldesfl::TrainConfig cfg;
  cfg.learning_rate = 1e200;
  cfg.grad_clip_norm.reset();
  cfg.steps_per_round = 50;
  ldesfl::BatchSampler sampler(1, 0, data_.size());
  EXPECT_THROW(ldesfl::local_train(Model::dense(LossKind::mse),
                                   ModelParams::dense(Vector::Ones(4)), data_,
                                   cfg, sampler),
               ldesfl::NumericError);
}

TEST_F(LocalTrainTest, LowRankNeverTouchesTheBase) {
  ldesfl::FrozenBase base;
  base.weights.push_back(Matrix::Constant(1, 4, 0.3));
  const auto model = Model::low_rank(LossKind::mse, base);
  const Matrix before = model.base().weights[0];
  ldesfl::TrainConfig cfg;
  ldesfl::BatchSampler sampler(1, 0, data_.size());
  const auto init = ModelParams::low_rank(
      {{Matrix::Constant(2, 4, 0.1), Matrix::Zero(1, 2)}});
  const auto r = ldesfl::local_train(model, init, data_, cfg, sampler);
  EXPECT_EQ(model.base().weights[0], before);
  EXPECT_FALSE(r.params == init);
}

TEST(EvaluateTest, MetricIsNegativeLossOrAccuracy) {
  LabeledSet set;
  for (int i = 0; i < 4; ++i) {
    ldesfl::Sample s;
    s.x = Vector::Constant(1, i < 2 ? 1.0 : -1.0);
    s.y = i == 3 ? 1.0 : (i < 2 ? 1.0 : 0.0);
    set.samples.push_back(s);
  }
  const auto w = ModelParams::dense(Vector::Constant(1, 2.0));
  const auto ce = ldesfl::evaluate(Model::dense(LossKind::cross_entropy), w, set);
  EXPECT_DOUBLE_EQ(ce.metric, 0.75);
  const auto mse = ldesfl::evaluate(Model::dense(LossKind::mse), w, set);
  // Residuals 1, 1, -2, -3.
  EXPECT_DOUBLE_EQ(mse.loss, (1.0 + 1.0 + 4.0 + 9.0) / 4.0);
  EXPECT_DOUBLE_EQ(mse.metric, -mse.loss);
  EXPECT_THROW(ldesfl::evaluate(Model::dense(LossKind::mse), w, LabeledSet{}),
               ldesfl::DataError);
}

class CentralizedFitTest : public testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(11);
    train_ = random_set(rng, 40, 3, LossKind::mse);
    val_ = random_set(rng, 10, 3, LossKind::mse);
    cfg_.batch_size = 8;
  }
  LabeledSet train_, val_;
  ldesfl::TrainConfig cfg_;
};

TEST_F(CentralizedFitTest, InjectedSequenceStopsAndReturnsTheFirstCheckpoint) {
  ldesfl::EarlyStopConfig es;
  es.min_delta = 0.01;
  es.patience = 2;
  const std::vector<double> losses = {1.0, 0.999, 0.998, 0.5};
  std::vector<ModelParams> seen;
  const auto fit = ldesfl::centralized_fit(
      Model::dense(LossKind::mse), ModelParams::dense(Vector::Zero(3)), train_,
      val_, cfg_, es, 1, 40, [&](int i, const ModelParams &p) {
        seen.push_back(p);
        return losses.at(i);
      });
  EXPECT_EQ(fit.history, (std::vector<double>{1.0, 0.999, 0.998}));
  EXPECT_EQ(fit.best_evaluation, 0);
  EXPECT_TRUE(fit.params == seen[0]);
  // One evaluation per 40-sample pass at batch 8.
  EXPECT_EQ(fit.total_steps, 3 * 5);
  EXPECT_FALSE(fit.capped);
}

TEST_F(CentralizedFitTest, ImprovementResetsPatience) {
  ldesfl::EarlyStopConfig es;
  es.min_delta = 0.01;
  es.patience = 2;
  const std::vector<double> losses = {1.0, 1.0, 0.9, 0.95, 0.95};
  const auto fit = ldesfl::centralized_fit(
      Model::dense(LossKind::mse), ModelParams::dense(Vector::Zero(3)), train_,
      val_, cfg_, es, 1, 40,
      [&](int i, const ModelParams &) { return losses.at(i); });
  EXPECT_EQ(fit.history.size(), 5u);
  EXPECT_EQ(fit.best_evaluation, 2);
}

TEST_F(CentralizedFitTest, StepCapIsReported) {
  ldesfl::EarlyStopConfig es;
  es.max_steps = 12;
  es.patience = 100;
  int calls = 0;
  const auto fit = ldesfl::centralized_fit(
      Model::dense(LossKind::mse), ModelParams::dense(Vector::Zero(3)), train_,
      val_, cfg_, es, 1, 40, [&](int, const ModelParams &) {
        return 1.0 - 0.1 * ++calls;
      });
  EXPECT_TRUE(fit.capped);
  EXPECT_EQ(fit.total_steps, 12);
  EXPECT_EQ(fit.history.size(), 3u);
}

TEST_F(CentralizedFitTest, BestCheckpointProperty) {
  ldesfl::EarlyStopConfig es;
  es.patience = 3;
  es.min_delta = 1e-3;
  cfg_.learning_rate = 0.05;
  const auto fit = ldesfl::centralized_fit(
      Model::dense(LossKind::mse), ModelParams::dense(Vector::Zero(3)), train_,
      val_, cfg_, es, 1, 40);
  ASSERT_GE(fit.best_evaluation, 0);
  const double best = fit.history[fit.best_evaluation];
  int streak = 0;
  for (std::size_t i = fit.best_evaluation + 1; i < fit.history.size(); ++i) {
    streak = best - fit.history[i] >= es.min_delta ? 0 : streak + 1;
    EXPECT_EQ(streak, static_cast<int>(i) - fit.best_evaluation);
  }
  EXPECT_EQ(static_cast<int>(fit.history.size()) - 1 - fit.best_evaluation,
            es.patience);
  EXPECT_DOUBLE_EQ(ldesfl::evaluate(Model::dense(LossKind::mse), fit.params, val_).loss,
                   best);
}

TEST(TrainConfigTest, Validation) {
  ldesfl::TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.grad_clip_norm = 0.0;
  EXPECT_THROW(cfg.validate(), ldesfl::ConfigError);
  cfg.grad_clip_norm.reset();
  cfg.learning_rate = std::numeric_limits<double>::infinity();
  EXPECT_THROW(cfg.validate(), ldesfl::ConfigError);
  ldesfl::EarlyStopConfig es;
  es.patience = 0;
  EXPECT_THROW(es.validate(), ldesfl::ConfigError);
}

}  // namespace
