// Copyright 2026 The ldesfl Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef LDESFL_TRAINER_HPP_
#define LDESFL_TRAINER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ldesfl/core.hpp"
#include "ldesfl/datagen.hpp"

namespace ldesfl {

enum class LossKind { mse, cross_entropy };

inline const char *to_string(LossKind loss) {
  return loss == LossKind::mse ? "mse" : "cross_entropy";
}

struct TrainConfig {
  int steps_per_round = 10;
  int batch_size = 32;
  double learning_rate = 0.01;
  std::optional<double> grad_clip_norm = 1.0;
  LossKind loss = LossKind::mse;

  void validate() const {
    if (steps_per_round < 1) throw ConfigError("steps_per_round must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning_rate must be finite and non-negative");
    }
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) {
      throw ConfigError("grad_clip_norm must be positive");
    }
  }

  std::uint64_t fingerprint() const {
    Fingerprint fp;
    fp.add(steps_per_round).add(batch_size).add(learning_rate).add(loss);
    fp.add(grad_clip_norm.has_value()).add(grad_clip_norm.value_or(0.0));
    return fp.value();
  }
};

struct EarlyStopConfig {
  int patience = 5;
  double min_delta = 0.001;
  /// Evaluation period, in passes over one client's worth of data.
  int eval_every = 1;
  long max_steps = 1'000'000;

  void validate() const {
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be >= 0");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  }
};

/// Frozen base weights of the low-rank model, one d_out x d_in matrix per
/// layer. Held behind a shared const pointer and never modified.
struct FrozenBase {
  std::vector<Matrix> weights;
};

/// A model family: the loss plus, for low-rank models, the frozen base.
///
/// Dense models predict <w, x>. Low-rank models chain linear layers
/// h_l = (W0_l + B_l A_l) h_{l-1}; the last layer has one output. Both emit
/// a scalar that is the regression output (mse) or the logit of class 1
/// (cross_entropy).
class Model {
 public:
  static Model dense(LossKind loss) { return Model(loss, nullptr); }

  static Model low_rank(LossKind loss, FrozenBase base) {
    if (base.weights.empty()) throw ConfigError("frozen base has no layers");
    for (std::size_t l = 1; l < base.weights.size(); ++l) {
      if (base.weights[l].cols() != base.weights[l - 1].rows()) {
        throw ConfigError("frozen base layer dims do not chain");
      }
    }
    if (base.weights.back().rows() != 1) {
      throw ConfigError("last layer must have a single output");
    }
    return Model(loss, std::make_shared<const FrozenBase>(std::move(base)));
  }

  LossKind loss() const { return loss_; }
  bool is_low_rank() const { return base_ != nullptr; }
  const FrozenBase &base() const { return *base_; }
  std::shared_ptr<const FrozenBase> shared_base() const { return base_; }

  void check_params(const ModelParams &params, Index input_dim) const {
    if (!is_low_rank()) {
      if (!params.is_dense() || params.size() != input_dim) {
        throw IncompatibleParamsError("dense model expects a dense vector");
      }
      return;
    }
    if (params.is_dense() || params.num_layers() != base_->weights.size()) {
      throw IncompatibleParamsError("low-rank params do not match the base");
    }
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
      const auto &s = params.layer_shapes()[l];
      const auto &w = base_->weights[l];
      if (s.d_in != w.cols() || s.d_out != w.rows()) {
        throw IncompatibleParamsError("low-rank layer shape mismatch");
      }
    }
    if (base_->weights.front().cols() != input_dim) {
      throw IncompatibleParamsError("base input dim mismatch");
    }
  }

  double output(const ModelParams &params, const Vector &x) const {
    if (!is_low_rank()) return params.flat().dot(x);
    Vector h = x;
    for (std::size_t l = 0; l < base_->weights.size(); ++l) {
      Vector u = params.factor_a(l) * h;
      h = base_->weights[l] * h + params.factor_b(l) * u;
    }
    return h[0];
  }

  /// Loss of one prediction and its derivative with respect to the output.
  std::pair<double, double> pointwise(double out, double y) const {
    if (loss_ == LossKind::mse) {
      const double r = out - y;
      return {r * r, 2.0 * r};
    }
    // log(1 + e^z) - y z, computed without overflow.
    const double softplus =
        out > 0.0 ? out + std::log1p(std::exp(-out)) : std::log1p(std::exp(out));
    const double prob = 1.0 / (1.0 + std::exp(-out));
    return {softplus - y * out, prob - y};
  }

  /// Mean loss over the indexed samples; accumulates the mean gradient into
  /// `grad` (flat layout of params) when non-null.
  double loss_and_gradient(const ModelParams &params, const LabeledSet &data,
                           std::span<const std::size_t> indices,
                           Vector *grad) const {
    if (grad) grad->setZero(params.size());
    double total = 0.0;
    const double scale = 1.0 / static_cast<double>(indices.size());
    if (!is_low_rank()) {
      for (std::size_t idx : indices) {
        const auto &s = data.samples[idx];
        const auto [l, g] = pointwise(params.flat().dot(s.x), s.y);
        total += l;
        if (grad) grad->noalias() += (g * scale) * s.x;
      }
      return total * scale;
    }

    const std::size_t layers = base_->weights.size();
    std::vector<Vector> inputs(layers);
    std::vector<Vector> projected(layers);
    for (std::size_t idx : indices) {
      const auto &s = data.samples[idx];
      Vector h = s.x;
      for (std::size_t l = 0; l < layers; ++l) {
        inputs[l] = h;
        projected[l] = params.factor_a(l) * h;
        h = base_->weights[l] * h + params.factor_b(l) * projected[l];
      }
      const auto [loss, g] = pointwise(h[0], s.y);
      total += loss;
      if (!grad) continue;
      Vector delta = Vector::Constant(1, g * scale);
      for (std::size_t li = layers; li-- > 0;) {
        const auto a = params.factor_a(li);
        const auto b = params.factor_b(li);
        const Index off = params.layer_offset(li);
        const auto &shape = params.layer_shapes()[li];
        Vector bt_delta = b.transpose() * delta;
        // dL/dA = (B^T delta) h^T, dL/dB = delta (A h)^T
        Eigen::Map<Matrix> ga(grad->data() + off, shape.rank, shape.d_in);
        Eigen::Map<Matrix> gb(grad->data() + off + shape.a_size(), shape.d_out,
                              shape.rank);
        ga.noalias() += bt_delta * inputs[li].transpose();
        gb.noalias() += delta * projected[li].transpose();
        if (li > 0) {
          delta = base_->weights[li].transpose() * delta +
                  a.transpose() * bt_delta;
        }
      }
    }
    return total * scale;
  }

 private:
  Model(LossKind loss, std::shared_ptr<const FrozenBase> base)
      : loss_(loss), base_(std::move(base)) {}

  LossKind loss_;
  std::shared_ptr<const FrozenBase> base_;
};

/// Mini-batch index stream: one shuffle per epoch, consumed through a
/// persistent position counter. Epoch e's permutation comes from a stream
/// derived from (seed, owner, e), so it never depends on scheduling.
class BatchSampler {
 public:
  BatchSampler(std::uint64_t seed, std::uint64_t owner, std::size_t n)
      : seed_(seed), owner_(owner), order_(n) {
    if (n == 0) throw DataError("cannot sample batches from an empty set");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        ++epoch_;
        reshuffle();
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  std::uint64_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    auto rng = derived_rng({stream::batches, seed_, owner_, epoch_});
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }

  std::uint64_t seed_;
  std::uint64_t owner_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

struct LocalTrainResult {
  ModelParams params;
  long steps = 0;
};

/// Applies exactly cfg.steps_per_round clipped mini-batch SGD updates to a
/// copy of `start`. In low-rank mode only the factors move; the base is
/// const.
inline LocalTrainResult local_train(const Model &model,
                                    const ModelParams &start,
                                    const LabeledSet &train,
                                    const TrainConfig &cfg,
                                    BatchSampler &sampler) {
  if (train.empty()) throw DataError("local training set is empty");
  cfg.validate();
  const std::size_t batch =
      std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                            train.size());
  Vector flat = start.flat();
  Vector grad(flat.size());
  ModelParams current = start;
  for (int step = 0; step < cfg.steps_per_round; ++step) {
    const auto idx = sampler.next(batch);
    const double loss = model.loss_and_gradient(current, train, idx, &grad);
    if (!std::isfinite(loss) || !grad.allFinite()) {
      throw NumericError("non-finite training loss", -1);
    }
    if (cfg.grad_clip_norm) {
      const double norm = grad.norm();
      if (norm > *cfg.grad_clip_norm) grad *= *cfg.grad_clip_norm / norm;
    }
    flat.noalias() -= cfg.learning_rate * grad;
    current = start.with_values(flat);
  }
  return {std::move(current), cfg.steps_per_round};
}

struct Evaluation {
  double loss = 0.0;
  /// Negative loss for mse, accuracy for cross_entropy. Higher is better.
  double metric = 0.0;
};

inline Evaluation evaluate(const Model &model, const ModelParams &params,
                           const LabeledSet &data) {
  if (data.empty()) throw DataError("evaluation set is empty");
  double loss = 0.0;
  double correct = 0.0;
  for (const auto &s : data.samples) {
    const double out = model.output(params, s.x);
    loss += model.pointwise(out, s.y).first;
    if ((out > 0.0 ? 1.0 : 0.0) == s.y) correct += 1.0;
  }
  const double n = static_cast<double>(data.size());
  Evaluation e;
  e.loss = loss / n;
  e.metric = model.loss() == LossKind::mse ? -e.loss : correct / n;
  return e;
}

/// Validation hook: maps (evaluation index, params) to a validation loss.
using ValidationFn = std::function<double(int, const ModelParams &)>;

struct FitResult {
  ModelParams params;
  std::vector<double> history;
  long total_steps = 0;
  int best_evaluation = -1;
  bool capped = false;
};

/// Single-model training with standard early stopping.
///
/// Evaluates every es.eval_every passes over `pass_samples` samples. An
/// evaluation counts as improvement only when it beats the best loss by at
/// least min_delta; training stops after `patience` consecutive
/// non-improving evaluations or at es.max_steps. Returns the best
/// checkpoint.
inline FitResult centralized_fit(const Model &model, const ModelParams &init,
                                 const LabeledSet &train,
                                 const LabeledSet &val, const TrainConfig &cfg,
                                 const EarlyStopConfig &es, std::uint64_t seed,
                                 std::size_t pass_samples,
                                 const ValidationFn &validator = {}) {
  if (train.empty()) throw DataError("training set is empty");
  cfg.validate();
  es.validate();
  const std::size_t batch =
      std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                            train.size());
  const long steps_per_pass =
      static_cast<long>((std::max<std::size_t>(pass_samples, 1) + batch - 1) /
                        batch);
  const long eval_period = steps_per_pass * es.eval_every;

  TrainConfig chunk = cfg;
  BatchSampler sampler(seed, ~std::uint64_t{0}, train.size());
  FitResult result;
  result.params = init;
  ModelParams current = init;
  double best = std::numeric_limits<double>::infinity();
  int waited = 0;
  while (true) {
    const long remaining = es.max_steps - result.total_steps;
    if (remaining <= 0) {
      result.capped = true;
      break;
    }
    chunk.steps_per_round = static_cast<int>(std::min(eval_period, remaining));
    auto trained = local_train(model, current, train, chunk, sampler);
    current = std::move(trained.params);
    result.total_steps += trained.steps;

    const int eval_index = static_cast<int>(result.history.size());
    const double loss = validator ? validator(eval_index, current)
                                  : evaluate(model, current, val).loss;
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite validation loss", eval_index);
    }
    result.history.push_back(loss);
    if (best - loss >= es.min_delta) {
      best = loss;
      result.params = current;
      result.best_evaluation = eval_index;
      waited = 0;
    } else if (++waited >= es.patience) {
      break;
    }
  }
  return result;
}

}  // namespace ldesfl

#endif  // LDESFL_TRAINER_HPP_
