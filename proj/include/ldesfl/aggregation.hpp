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

#ifndef LDESFL_AGGREGATION_HPP_
#define LDESFL_AGGREGATION_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ldesfl/core.hpp"

namespace ldesfl {

struct AggregationWeights {
  std::vector<double> alphas;
  std::vector<std::int64_t> source_sizes;
};

/// alpha_i = |D_i| / sum_j |D_j|.
inline AggregationWeights weights_from_sizes(
    const std::vector<std::int64_t> &sizes) {
  if (sizes.empty()) throw ConfigError("no client sizes given");
  std::int64_t total = 0;
  for (auto s : sizes) {
    if (s < 1) throw ConfigError("client sizes must be >= 1");
    total += s;
  }
  AggregationWeights w;
  w.source_sizes = sizes;
  w.alphas.reserve(sizes.size());
  double sum = 0.0;
  for (auto s : sizes) {
    w.alphas.push_back(static_cast<double>(s) / static_cast<double>(total));
    sum += w.alphas.back();
  }
  // Renormalize so the alphas sum to 1 after rounding.
  for (double &a : w.alphas) a /= sum;
  return w;
}

/// Weighted element-wise combination. Low-rank params are combined factor by
/// factor (A with A, B with B), which is what averaging the flat buffers
/// does. Clients are summed in ascending index order.
inline ModelParams fedavg(const std::vector<ModelParams> &params,
                          const AggregationWeights &weights) {
  if (params.empty()) throw ConfigError("nothing to aggregate");
  if (params.size() != weights.alphas.size()) {
    throw ConfigError("params and weights differ in length");
  }
  for (const auto &p : params) require_aggregable(params.front(), p);

  Vector acc = Vector::Zero(params.front().size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    acc.noalias() += weights.alphas[i] * params[i].flat();
  }
  // Rounding can push a coordinate an ulp outside the inputs' range; clamp
  // so the result is a convex combination coordinate-wise.
  for (Index c = 0; c < acc.size(); ++c) {
    double lo = params.front().flat()[c];
    double hi = lo;
    for (std::size_t i = 1; i < params.size(); ++i) {
      lo = std::min(lo, params[i].flat()[c]);
      hi = std::max(hi, params[i].flat()[c]);
    }
    acc[c] = std::clamp(acc[c], lo, hi);
  }
  return params.front().with_values(std::move(acc));
}

/// Sum over layers of ||B_bar A_bar - sum_i alpha_i B_i A_i||_F, where
/// A_bar and B_bar are the factor-wise averages.
inline double lowrank_product_gap(const std::vector<ModelParams> &params,
                                  const AggregationWeights &weights) {
  if (params.size() < 2) throw ConfigError("need at least two clients");
  for (const auto &p : params) {
    if (p.is_dense()) {
      throw IncompatibleParamsError("product gap needs low-rank params");
    }
  }
  const ModelParams avg = fedavg(params, weights);
  double gap = 0.0;
  for (std::size_t l = 0; l < avg.num_layers(); ++l) {
    Matrix product_of_mean = avg.factor_b(l) * avg.factor_a(l);
    Matrix mean_of_products = Matrix::Zero(product_of_mean.rows(),
                                           product_of_mean.cols());
    for (std::size_t i = 0; i < params.size(); ++i) {
      mean_of_products.noalias() +=
          weights.alphas[i] * (params[i].factor_b(l) * params[i].factor_a(l));
    }
    gap += (product_of_mean - mean_of_products).norm();
  }
  return gap;
}

}  // namespace ldesfl

#endif  // LDESFL_AGGREGATION_HPP_
