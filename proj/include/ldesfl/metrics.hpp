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

#ifndef LDESFL_METRICS_HPP_
#define LDESFL_METRICS_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ldesfl/core.hpp"
#include "ldesfl/datagen.hpp"
#include "ldesfl/trainer.hpp"

namespace ldesfl {

struct MeanSigma {
  double mean = 0.0;
  double sigma = 0.0;
};

/// Arithmetic mean and population standard deviation.
inline MeanSigma mean_sigma(const std::vector<double> &values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / n)};
}

struct EvalReport {
  /// Task metric per language (higher is better).
  std::vector<double> per_language;
  std::vector<double> per_language_loss;
  double mean = 0.0;
  double sigma = 0.0;
  long total_steps = 0;
  std::string composition_label;
};

inline EvalReport make_report(std::vector<double> per_language,
                              std::vector<double> per_language_loss = {}) {
  EvalReport r;
  const auto ms = mean_sigma(per_language);
  r.mean = ms.mean;
  r.sigma = ms.sigma;
  r.per_language = std::move(per_language);
  r.per_language_loss = std::move(per_language_loss);
  return r;
}

/// Scores `params` on every per-language server test set.
inline EvalReport evaluate_global(const Model &model, const ModelParams &params,
                                  const std::vector<LabeledSet> &server_test) {
  if (server_test.empty()) throw DataError("no server test sets");
  std::vector<double> metric;
  std::vector<double> loss;
  for (const auto &set : server_test) {
    const auto e = evaluate(model, params, set);
    metric.push_back(e.metric);
    loss.push_back(e.loss);
  }
  return make_report(std::move(metric), std::move(loss));
}

enum class ResourceGroup { high = 0, mid = 1, low = 2 };

inline const char *to_string(ResourceGroup g) {
  switch (g) {
    case ResourceGroup::high: return "H";
    case ResourceGroup::mid: return "M";
    case ResourceGroup::low: return "L";
  }
  return "?";
}

/// The 3/2/3 high/mid/low grouping used for eight languages, ordered from
/// highest to lowest resource.
inline std::map<int, ResourceGroup> default_resource_groups() {
  return {{0, ResourceGroup::high}, {1, ResourceGroup::high},
          {2, ResourceGroup::high}, {3, ResourceGroup::mid},
          {4, ResourceGroup::mid},  {5, ResourceGroup::low},
          {6, ResourceGroup::low},  {7, ResourceGroup::low}};
}

struct ResourceGroupSummary {
  /// Indexed by ResourceGroup; NaN when the group has no language.
  std::array<double, 3> mean_a{};
  std::array<double, 3> mean_b{};
  /// mean_b - mean_a.
  std::array<double, 3> delta{};

  double delta_of(ResourceGroup g) const {
    return delta[static_cast<std::size_t>(g)];
  }
};

/// Group means of two reports (composition A, then B) and their deltas.
inline ResourceGroupSummary resource_group_summary(
    const EvalReport &a, const EvalReport &b,
    const std::map<int, ResourceGroup> &groups) {
  if (a.per_language.size() != b.per_language.size()) {
    throw ConfigError("reports cover different language counts");
  }
  const int k = static_cast<int>(a.per_language.size());
  std::array<double, 3> sum_a{}, sum_b{};
  std::array<int, 3> count{};
  for (int lang = 0; lang < k; ++lang) {
    const auto it = groups.find(lang);
    if (it == groups.end()) {
      throw ConfigError("language " + std::to_string(lang) +
                        " has no resource group");
    }
    const auto g = static_cast<std::size_t>(it->second);
    sum_a[g] += a.per_language[lang];
    sum_b[g] += b.per_language[lang];
    ++count[g];
  }
  ResourceGroupSummary s;
  for (std::size_t g = 0; g < 3; ++g) {
    const double n = count[g];
    s.mean_a[g] = n > 0 ? sum_a[g] / n : std::nan("");
    s.mean_b[g] = n > 0 ? sum_b[g] / n : std::nan("");
    s.delta[g] = s.mean_b[g] - s.mean_a[g];
  }
  return s;
}

/// 1 - steps(ldes) / steps(standard); both runs must share data and trainer
/// settings.
inline double step_reduction(const RunResult &ldes,
                             const RunResult &standard) {
  if (ldes.data_fingerprint != standard.data_fingerprint ||
      ldes.train_fingerprint != standard.train_fingerprint) {
    throw ComparisonError("runs use different data or trainer settings");
  }
  if (standard.total_optimizer_steps <= 0) {
    throw ComparisonError("reference run took no optimizer steps");
  }
  return 1.0 - static_cast<double>(ldes.total_optimizer_steps) /
                   static_cast<double>(standard.total_optimizer_steps);
}

/// Participation timeline: training[r][c] is true when client c trained in
/// the r-th recorded round.
struct Timeline {
  std::vector<std::vector<bool>> training;
  std::vector<int> rejoin_counts;

  std::size_t rounds() const { return training.size(); }
};

inline Timeline build_timeline(const RunResult &run) {
  if (run.rounds.empty()) throw DataError("run has no rounds");
  Timeline tl;
  const std::size_t k = run.rounds.front().active_mask.size();
  tl.rejoin_counts.assign(k, 0);
  for (const auto &r : run.rounds) {
    tl.training.push_back(r.active_mask);
    for (auto c : r.rejoin_events) ++tl.rejoin_counts.at(c);
  }
  return tl;
}

inline int total_rejoins(const RunResult &run) {
  int total = 0;
  for (const auto &r : run.rounds) total += static_cast<int>(r.rejoin_events.size());
  return total;
}

/// Mean drift over the first `count` validation rounds.
inline double early_drift(const RunResult &run, int count) {
  double sum = 0.0;
  int seen = 0;
  for (const auto &r : run.rounds) {
    if (!r.validation) continue;
    if (seen == count) break;
    sum += r.drift;
    ++seen;
  }
  return seen == 0 ? 0.0 : sum / seen;
}

/// Ranks with ties resolved to their average (1-based).
inline std::vector<double> average_ranks(const std::vector<double> &v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = rank;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns 0 when either input is constant.
inline double spearman(const std::vector<double> &x,
                       const std::vector<double> &y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ConfigError("spearman needs two equal-length series of size >= 2");
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const auto mx = mean_sigma(rx).mean;
  const auto my = mean_sigma(ry).mean;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace ldesfl

#endif  // LDESFL_METRICS_HPP_
