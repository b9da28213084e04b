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

// Synthetic "language family" tasks and per-client federation datasets.
//
// Every language shares one ground-truth component and adds its own
// deviation; per-language label noise stands in for resource level (more
// noise means a lower-resource language). Client datasets follow the
// mono/multi composition scheme: a fraction s of each client's samples come
// from its dominant language and the rest are split evenly over the others.

#ifndef LDESFL_DATAGEN_HPP_
#define LDESFL_DATAGEN_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ldesfl/core.hpp"

namespace ldesfl {

enum class TaskKind { regression, classification };

inline const char *to_string(TaskKind kind) {
  return kind == TaskKind::regression ? "regression" : "classification";
}

/// Derived generator for a tuple of stream identifiers. std::seed_seq has a
/// fully specified mixing algorithm, so streams are stable across platforms.
inline std::mt19937_64 derived_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(keys.size() * 2);
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

// Stream tags so that no two purposes ever draw from the same generator.
namespace stream {
inline constexpr std::uint64_t family = 0x66616d696c79ULL;
inline constexpr std::uint64_t client_data = 0x636c69656e74ULL;
inline constexpr std::uint64_t server_test = 0x74657374ULL;
inline constexpr std::uint64_t batches = 0x6261746368ULL;
inline constexpr std::uint64_t init = 0x696e6974ULL;
}  // namespace stream

struct Sample {
  std::int64_t id = 0;
  int language = 0;
  Vector x;
  /// Regression target, or class label 0/1 for classification.
  double y = 0.0;
};

struct LabeledSet {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Shape of the generated ground truth and inputs.
///
/// Truth coordinates are drawn N(0, 1), scaled so that vector norms are close
/// to `shared` and `language`. With language_block = b > 0 the last K*b input
/// coordinates form one private block of b features per language ("its
/// vocabulary"): language k's component lives only on block k, the shared
/// component only on the leading coordinates, and a language-k input is zero
/// on every other language's block. With b = 0 all coordinates are shared
/// and every language draws inputs from the same distribution.
struct FamilyScales {
  double shared = 1.0;
  double language = 1.0;
  int language_block = 0;
};

struct TaskFamily {
  int num_languages = 0;
  int input_dim = 0;
  Vector shared_component;
  std::vector<Vector> language_components;
  std::vector<double> noise_scales;
  /// Per-language standard deviation of every input coordinate (0 outside
  /// the language's support).
  std::vector<Vector> input_scales;
  TaskKind task_kind = TaskKind::regression;

  Vector truth(int language) const {
    return shared_component + language_components.at(language);
  }
};

inline TaskFamily generate_family(int num_languages, int input_dim,
                                  const std::vector<double> &noise_profile,
                                  TaskKind kind, std::uint64_t seed,
                                  FamilyScales scales = {}) {
  if (num_languages < 2) throw ConfigError("need at least two languages");
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (static_cast<int>(noise_profile.size()) != num_languages) {
    throw ConfigError("noise_profile length must equal num_languages");
  }
  for (double n : noise_profile) {
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw ConfigError("noise scales must be finite and positive");
    }
  }
  if (!(scales.shared >= 0.0) || !(scales.language >= 0.0)) {
    throw ConfigError("family scales must be non-negative");
  }

  const int private_dims = num_languages * scales.language_block;
  if (scales.language_block < 0 || private_dims >= input_dim) {
    throw ConfigError("language blocks must leave at least one shared input");
  }
  const int shared_dims = input_dim - private_dims;

  TaskFamily family;
  family.num_languages = num_languages;
  family.input_dim = input_dim;
  family.noise_scales = noise_profile;
  family.task_kind = kind;

  auto rng = derived_rng({stream::family, seed});
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](double scale, int begin, int count) {
    Vector v = Vector::Zero(input_dim);
    const double unit = scale / std::sqrt(static_cast<double>(count));
    for (int i = begin; i < begin + count; ++i) v[i] = normal(rng) * unit;
    return v;
  };
  const bool blocks = scales.language_block > 0;
  family.shared_component = draw(scales.shared, 0, blocks ? shared_dims : input_dim);
  for (int k = 0; k < num_languages; ++k) {
    family.language_components.push_back(
        blocks ? draw(scales.language, shared_dims + k * scales.language_block,
                      scales.language_block)
               : draw(scales.language, 0, input_dim));
    Vector support = Vector::Ones(input_dim);
    if (blocks) {
      support.tail(private_dims).setZero();
      support.segment(shared_dims + k * scales.language_block,
                      scales.language_block)
          .setOnes();
    }
    family.input_scales.push_back(support);
  }
  return family;
}

/// Per-language sample counts for a client dominant in `dominant`.
///
/// The dominant language receives round(s * n); the remainder is split over
/// the other languages with any leftover handed out one at a time in
/// ascending language order.
inline std::vector<int> language_counts(double mono_fraction,
                                        int num_languages, int n,
                                        int dominant) {
  if (!(mono_fraction >= 0.0 && mono_fraction <= 1.0)) {
    throw ConfigError("mono fraction must lie in [0, 1]");
  }
  if (num_languages < 2) throw ConfigError("need at least two languages");
  if (n < num_languages) throw ConfigError("n must be >= num_languages");
  if (dominant < 0 || dominant >= num_languages) {
    throw ConfigError("dominant language out of range");
  }
  std::vector<int> counts(num_languages, 0);
  const int own =
      static_cast<int>(std::lround(mono_fraction * static_cast<double>(n)));
  counts[dominant] = own;
  const int rest = n - own;
  const int others = num_languages - 1;
  int leftover = rest % others;
  for (int k = 0; k < num_languages; ++k) {
    if (k == dominant) continue;
    counts[k] = rest / others;
    if (leftover > 0) {
      ++counts[k];
      --leftover;
    }
  }
  return counts;
}

struct ClientData {
  LabeledSet train;
  LabeledSet val;
  int dominant_language = 0;
};

struct FederationData {
  std::vector<ClientData> clients;
  /// One held-out test set per language, kept on the server.
  std::vector<LabeledSet> server_test;
  CompositionSpec composition;
  int input_dim = 0;
  TaskKind task_kind = TaskKind::regression;
};

namespace detail {

inline Sample draw_sample(const TaskFamily &family, const Vector &truth,
                          int language, std::mt19937_64 &rng,
                          std::int64_t id) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Sample s;
  s.id = id;
  s.language = language;
  s.x.resize(family.input_dim);
  const Vector &scale = family.input_scales[language];
  for (int i = 0; i < family.input_dim; ++i) {
    s.x[i] = scale[i] == 0.0 ? 0.0 : scale[i] * normal(rng);
  }
  const double signal = truth.dot(s.x);
  const double noisy = signal + family.noise_scales[language] * normal(rng);
  if (family.task_kind == TaskKind::regression) {
    s.y = noisy;
  } else {
    s.y = noisy > 0.0 ? 1.0 : 0.0;
  }
  return s;
}

inline LabeledSet draw_set(const TaskFamily &family,
                           const std::vector<int> &counts,
                           std::uint64_t seed, std::uint64_t client,
                           std::uint64_t split, std::int64_t &next_id) {
  LabeledSet set;
  for (int k = 0; k < family.num_languages; ++k) {
    if (counts[k] == 0) continue;
    auto rng = derived_rng({stream::client_data, seed, client, split,
                            static_cast<std::uint64_t>(k)});
    const Vector truth = family.truth(k);
    for (int i = 0; i < counts[k]; ++i) {
      set.samples.push_back(draw_sample(family, truth, k, rng, next_id++));
    }
  }
  return set;
}

}  // namespace detail

/// Server test sets depend only on (family, seed, test size), never on the
/// composition, so runs at different compositions share one test set.
inline std::vector<LabeledSet> make_server_test(const TaskFamily &family,
                                                int test_per_language,
                                                std::uint64_t seed,
                                                std::int64_t first_id) {
  std::vector<LabeledSet> test(family.num_languages);
  std::int64_t id = first_id;
  for (int k = 0; k < family.num_languages; ++k) {
    auto rng = derived_rng({stream::server_test, seed,
                            static_cast<std::uint64_t>(k)});
    const Vector truth = family.truth(k);
    for (int i = 0; i < test_per_language; ++i) {
      test[k].samples.push_back(detail::draw_sample(family, truth, k, rng, id++));
    }
  }
  return test;
}

/// Materializes K clients (client i dominant in language i) plus the server
/// test set. Validation follows the training composition. Sample ids are
/// assigned sequentially: client 0 train, client 0 val, client 1 train, ...,
/// then the server test sets.
inline FederationData make_federation(const TaskFamily &family,
                                      const CompositionSpec &spec) {
  spec.validate();
  if (spec.num_languages != family.num_languages) {
    throw ConfigError("composition and family disagree on language count");
  }
  FederationData data;
  data.composition = spec;
  data.input_dim = family.input_dim;
  data.task_kind = family.task_kind;
  std::int64_t next_id = 0;
  for (int c = 0; c < spec.num_languages; ++c) {
    ClientData client;
    client.dominant_language = c;
    const auto train_counts = language_counts(
        spec.mono_fraction, spec.num_languages, spec.train_per_client, c);
    const auto val_counts = language_counts(
        spec.mono_fraction, spec.num_languages, spec.val_per_client, c);
    client.train = detail::draw_set(family, train_counts, spec.seed,
                                    static_cast<std::uint64_t>(c), 0, next_id);
    client.val = detail::draw_set(family, val_counts, spec.seed,
                                  static_cast<std::uint64_t>(c), 1, next_id);
    data.clients.push_back(std::move(client));
  }
  data.server_test =
      make_server_test(family, spec.test_per_language, spec.seed, next_id);
  return data;
}

/// Union of all clients' training (or validation) samples, in client order.
inline LabeledSet pooled_train(const FederationData &data) {
  LabeledSet out;
  for (const auto &c : data.clients) {
    out.samples.insert(out.samples.end(), c.train.samples.begin(),
                       c.train.samples.end());
  }
  return out;
}

inline LabeledSet pooled_val(const FederationData &data) {
  LabeledSet out;
  for (const auto &c : data.clients) {
    out.samples.insert(out.samples.end(), c.val.samples.begin(),
                       c.val.samples.end());
  }
  return out;
}

/// Fraction of samples per language.
inline std::vector<double> language_histogram(const LabeledSet &set,
                                              int num_languages) {
  std::vector<double> hist(num_languages, 0.0);
  for (const auto &s : set.samples) hist.at(s.language) += 1.0;
  for (double &h : hist) h /= static_cast<double>(set.size());
  return hist;
}

/// Mean pairwise total-variation distance between clients' training
/// language histograms. 0 means every client holds the same mixture.
inline double composition_divergence(const FederationData &data) {
  const int k = data.composition.num_languages;
  std::vector<std::vector<double>> hists;
  for (const auto &c : data.clients) {
    hists.push_back(language_histogram(c.train, k));
  }
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < hists.size(); ++i) {
    for (std::size_t j = i + 1; j < hists.size(); ++j) {
      double tv = 0.0;
      for (int l = 0; l < k; ++l) tv += std::abs(hists[i][l] - hists[j][l]);
      total += 0.5 * tv;
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : total / pairs;
}

inline std::uint64_t fingerprint(const FederationData &data) {
  Fingerprint fp;
  auto add_set = [&](const LabeledSet &set) {
    fp.add(set.size());
    for (const auto &s : set.samples) {
      fp.add(s.id).add(s.language).add(s.y);
      fp.add_bytes(s.x.data(), sizeof(double) * s.x.size());
    }
  };
  for (const auto &c : data.clients) {
    add_set(c.train);
    add_set(c.val);
  }
  for (const auto &t : data.server_test) add_set(t);
  return fp.value();
}

/// Line-delimited export: one sample per line, comma-separated, fields in
/// the order id, language, x_0 .. x_{d-1}, y. Reals use %.17g so a reader
/// recovers every value exactly. No header line.
inline void write_records(std::ostream &out, const LabeledSet &set) {
  char buf[32];
  for (const auto &s : set.samples) {
    out << s.id << ',' << s.language;
    for (Index i = 0; i < s.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", s.x[i]);
      out << ',' << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", s.y);
    out << ',' << buf << '\n';
  }
}

}  // namespace ldesfl

#endif  // LDESFL_DATAGEN_HPP_
