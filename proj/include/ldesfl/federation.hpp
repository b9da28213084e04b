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

// The federated round loop.
//
// Each round: active clients train from the last broadcast global, stopped
// clients contribute their frozen best params, the server averages all
// contributions and broadcasts. Every validation_interval rounds each client
// scores the new global on its private validation set.
//
// Under local dynamic early stopping (ldes) every client keeps its own
// patience counter, stops when the global stops improving its validation
// loss, and rejoins as soon as a later global does at least as well as its
// best. The run ends when no client is active. Under standard federated
// early stopping a single counter watches the mean client loss and all
// clients train until it runs out.

#ifndef LDESFL_FEDERATION_HPP_
#define LDESFL_FEDERATION_HPP_

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <thread>
#include <vector>

#include "ldesfl/aggregation.hpp"
#include "ldesfl/core.hpp"
#include "ldesfl/datagen.hpp"
#include "ldesfl/trainer.hpp"

namespace ldesfl {

struct FederationConfig {
  StoppingMode mode = StoppingMode::ldes;
  int p_max = 1;
  int global_patience = 1;
  int validation_interval = 5;
  int max_rounds = 2000;
  TrainConfig train;
  ModelParams init_params;
  std::uint64_t seed = 0;
  /// Threads used for the per-round client work. Results do not depend on it.
  int workers = 1;

  void validate() const {
    if (p_max < 1) throw ConfigError("p_max must be >= 1");
    if (global_patience < 1) throw ConfigError("global_patience must be >= 1");
    if (validation_interval < 1) {
      throw ConfigError("validation_interval must be >= 1");
    }
    if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    train.validate();
  }
};

/// Replaces the per-client validation evaluation: (client, round, global).
using ClientValidationFn =
    std::function<double(std::size_t, int, const ModelParams &)>;

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the
/// exception of the lowest failing index.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn &&fn) {
  const std::size_t threads =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += threads) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto &e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

/// One client's reaction to the validation loss of a new global model.
///
/// A strictly worse loss bumps patience (saturating at p_max) and stops the
/// client once patience reaches p_max, freezing its best params as its
/// contribution. Anything else, ties included, is an improvement: the client
/// becomes active, patience resets and the global becomes its best.
inline ClientState validation_step(ClientState state, double global_loss,
                                   const ModelParams &global, int p_max) {
  if (global_loss > state.best_val_loss) {
    state.patience = std::min(state.patience + 1, p_max);
    if (state.patience >= p_max && state.active) {
      state.active = false;
      state.local_params = state.best_params;
    }
  } else {
    state.active = true;
    state.patience = 0;
    state.best_val_loss = global_loss;
    state.best_params = global;
  }
  return state;
}

/// Mean distance between client params and the aggregate.
inline double drift_diagnostic(const std::vector<ModelParams> &round_params,
                               const ModelParams &aggregate) {
  if (round_params.empty()) throw ConfigError("no client params");
  double total = 0.0;
  for (const auto &p : round_params) total += params_distance(p, aggregate);
  return total / static_cast<double>(round_params.size());
}

inline RunResult run_federation(const Model &model, const FederationData &data,
                                const FederationConfig &cfg,
                                const ClientValidationFn &validator = {}) {
  cfg.validate();
  if (data.clients.empty()) throw DataError("federation has no clients");
  model.check_params(cfg.init_params, data.input_dim);
  const std::size_t k = data.clients.size();

  std::vector<std::int64_t> sizes;
  for (const auto &c : data.clients) {
    if (c.train.empty()) throw DataError("client has an empty training set");
    if (c.val.empty()) throw DataError("client has an empty validation set");
    sizes.push_back(static_cast<std::int64_t>(c.train.size()));
  }
  const auto weights = weights_from_sizes(sizes);

  std::vector<ClientState> states;
  std::vector<BatchSampler> samplers;
  for (std::size_t i = 0; i < k; ++i) {
    states.push_back(ClientState::initial(i, cfg.init_params));
    samplers.emplace_back(cfg.seed, i, data.clients[i].train.size());
  }

  RunResult result;
  result.mode = cfg.mode;
  result.data_fingerprint = fingerprint(data);
  result.train_fingerprint = cfg.train.fingerprint();

  const bool ldes = cfg.mode == StoppingMode::ldes;
  ModelParams global = cfg.init_params;
  ModelParams best_global = cfg.init_params;
  double best_mean = std::numeric_limits<double>::infinity();
  int global_wait = 0;
  bool validated = false;
  bool terminated = false;

  std::vector<ModelParams> contributed(k);
  std::vector<double> losses(k);
  for (int t = 1; t <= cfg.max_rounds && !terminated; ++t) {
    RoundRecord rec;
    rec.round_index = t;
    rec.steps.assign(k, 0);
    for (const auto &s : states) rec.active_mask.push_back(s.active);

    try {
      detail::parallel_for(k, cfg.workers, [&](std::size_t i) {
        auto &state = states[i];
        if (!state.active) {
          contributed[i] = state.best_params;
          return;
        }
        auto trained = local_train(model, global, data.clients[i].train,
                                   cfg.train, samplers[i]);
        state.local_params = std::move(trained.params);
        state.optimizer_steps += trained.steps;
        rec.steps[i] = trained.steps;
        contributed[i] = state.local_params;
      });
    } catch (const NumericError &) {
      throw NumericError("local training diverged", t);
    }

    global = fedavg(contributed, weights);
    rec.drift = drift_diagnostic(contributed, global);
    if (!global.is_dense() && k >= 2) {
      rec.lowrank_gap = lowrank_product_gap(contributed, weights);
    }
    result.total_optimizer_steps += rec.total_steps();

    if (t % cfg.validation_interval == 0) {
      rec.validation = true;
      validated = true;
      detail::parallel_for(k, cfg.workers, [&](std::size_t i) {
        losses[i] = validator ? validator(i, t, global)
                              : evaluate(model, global, data.clients[i].val).loss;
      });
      for (double l : losses) {
        if (!std::isfinite(l)) throw NumericError("non-finite validation loss", t);
      }
      result.validation_evaluations += static_cast<long>(k);
      rec.per_client_val_loss = losses;
      double mean = 0.0;
      for (double l : losses) mean += l;
      mean /= static_cast<double>(k);
      rec.mean_val_loss = mean;

      if (ldes) {
        for (std::size_t i = 0; i < k; ++i) {
          const bool was_active = states[i].active;
          states[i] = validation_step(std::move(states[i]), losses[i], global,
                                      cfg.p_max);
          if (was_active && !states[i].active) rec.stop_events.insert(i);
          if (!was_active && states[i].active) rec.rejoin_events.insert(i);
        }
        terminated = std::none_of(states.begin(), states.end(),
                                  [](const auto &s) { return s.active; });
      } else {
        if (mean > best_mean) {
          global_wait = std::min(global_wait + 1, cfg.global_patience);
          if (global_wait >= cfg.global_patience) terminated = true;
        } else {
          best_mean = mean;
          best_global = global;
          global_wait = 0;
        }
        if (terminated) {
          for (std::size_t i = 0; i < k; ++i) {
            states[i].active = false;
            rec.stop_events.insert(i);
          }
        }
      }
    }
    for (const auto &s : states) rec.active_after.push_back(s.active);
    result.rounds.push_back(std::move(rec));
  }

  result.capped = !terminated;
  result.termination_round = result.rounds.back().round_index;
  result.final_params = (ldes || !validated) ? global : best_global;
  result.final_states = std::move(states);
  return result;
}

}  // namespace ldesfl

#endif  // LDESFL_FEDERATION_HPP_
