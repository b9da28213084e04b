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

#ifndef LDESFL_CORE_HPP_
#define LDESFL_CORE_HPP_

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace ldesfl {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Error taxonomy. Every failure the library reports derives from Error so
// that callers running sweeps can catch one type per run.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IncompatibleParamsError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ComparisonError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(const std::string &what, int round)
      : Error(what + " (round " + std::to_string(round) + ")"), round_(round) {}

  int round() const noexcept { return round_; }

 private:
  int round_;
};

/// Shape of one low-rank adapter layer: A is rank x d_in, B is d_out x rank.
struct LayerShape {
  Index rank = 1;
  Index d_in = 1;
  Index d_out = 1;

  Index a_size() const { return rank * d_in; }
  Index b_size() const { return d_out * rank; }

  friend bool operator==(const LayerShape &, const LayerShape &) = default;
};

/// Trainable parameters.
///
/// Two forms exist: a dense vector, or a list of low-rank factor pairs
/// (A_l, B_l). Values live in one contiguous flat buffer; for the low-rank
/// form the buffer holds, per layer, A then B, each column-major. Factor
/// accessors return read-only maps into that buffer. The product B*A is
/// never stored.
///
/// Instances are immutable after construction. Arithmetic helpers return
/// new values.
class ModelParams {
 public:
  enum class Form { dense, low_rank };

  ModelParams() = default;

  static ModelParams dense(Vector values) {
    ModelParams p;
    p.form_ = Form::dense;
    p.flat_ = std::move(values);
    return p;
  }

  struct Factors {
    Matrix a;
    Matrix b;
  };

  static ModelParams low_rank(const std::vector<Factors> &layers) {
    if (layers.empty()) {
      throw ConfigError("low-rank params need at least one layer");
    }
    std::vector<LayerShape> shapes;
    shapes.reserve(layers.size());
    Index total = 0;
    for (const auto &layer : layers) {
      const LayerShape shape{layer.a.rows(), layer.a.cols(), layer.b.rows()};
      if (shape.rank < 1) {
        throw ConfigError("low-rank layer rank must be >= 1");
      }
      if (layer.b.cols() != shape.rank) {
        throw ConfigError("B factor columns must equal the rank of A");
      }
      if (!shapes.empty() && shapes.front().rank != shape.rank) {
        throw ConfigError("all low-rank layers must share one rank");
      }
      shapes.push_back(shape);
      total += shape.a_size() + shape.b_size();
    }
    Vector flat(total);
    Index offset = 0;
    for (const auto &layer : layers) {
      flat.segment(offset, layer.a.size()) =
          Eigen::Map<const Vector>(layer.a.data(), layer.a.size());
      offset += layer.a.size();
      flat.segment(offset, layer.b.size()) =
          Eigen::Map<const Vector>(layer.b.data(), layer.b.size());
      offset += layer.b.size();
    }
    ModelParams p;
    p.form_ = Form::low_rank;
    p.layers_ = std::move(shapes);
    p.flat_ = std::move(flat);
    return p;
  }

  /// Same form and shapes as this, with the given flat values.
  ModelParams with_values(Vector flat) const {
    if (flat.size() != flat_.size()) {
      throw IncompatibleParamsError("flat value count does not match shape");
    }
    ModelParams p = *this;
    p.flat_ = std::move(flat);
    return p;
  }

  Form form() const { return form_; }
  bool is_dense() const { return form_ == Form::dense; }
  const Vector &flat() const { return flat_; }
  Index size() const { return flat_.size(); }

  const std::vector<LayerShape> &layer_shapes() const { return layers_; }
  std::size_t num_layers() const { return layers_.size(); }
  Index rank() const { return layers_.empty() ? 0 : layers_.front().rank; }

  Eigen::Map<const Matrix> factor_a(std::size_t layer) const {
    const auto &s = layers_.at(layer);
    return {flat_.data() + layer_offset(layer), s.rank, s.d_in};
  }

  Eigen::Map<const Matrix> factor_b(std::size_t layer) const {
    const auto &s = layers_.at(layer);
    return {flat_.data() + layer_offset(layer) + s.a_size(), s.d_out, s.rank};
  }

  /// Offset of layer's A block in the flat buffer; B follows immediately.
  Index layer_offset(std::size_t layer) const {
    Index offset = 0;
    for (std::size_t l = 0; l < layer; ++l) {
      offset += layers_[l].a_size() + layers_[l].b_size();
    }
    return offset;
  }

  bool same_shape(const ModelParams &other) const {
    return form_ == other.form_ && layers_ == other.layers_ &&
           flat_.size() == other.flat_.size();
  }

  /// Bitwise equality of shape and values.
  friend bool operator==(const ModelParams &a, const ModelParams &b) {
    if (!a.same_shape(b)) return false;
    for (Index i = 0; i < a.flat_.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(a.flat_[i]) !=
          std::bit_cast<std::uint64_t>(b.flat_[i])) {
        return false;
      }
    }
    return true;
  }

 private:
  Form form_ = Form::dense;
  std::vector<LayerShape> layers_;
  Vector flat_;
};

/// FNV-1a accumulator used for run fingerprints.
class Fingerprint {
 public:
  Fingerprint &add_bytes(const void *data, std::size_t n) {
    const auto *p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  template <typename T>
  Fingerprint &add(const T &value) {
    static_assert(std::is_trivially_copyable_v<T>);
    return add_bytes(&value, sizeof(T));
  }

  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline bool aggregable(const ModelParams &a, const ModelParams &b) {
  return a.same_shape(b);
}

inline void require_aggregable(const ModelParams &a, const ModelParams &b) {
  if (!aggregable(a, b)) {
    throw IncompatibleParamsError("model params differ in form or shape");
  }
}

inline ModelParams params_zero_like(const ModelParams &tmpl) {
  return tmpl.with_values(Vector::Zero(tmpl.size()));
}

/// Euclidean norm of the flattened difference.
inline double params_distance(const ModelParams &a, const ModelParams &b) {
  require_aggregable(a, b);
  double sum = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = a.flat()[i] - b.flat()[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

/// Per-client protocol state of the local early-stopping loop.
struct ClientState {
  std::size_t client_id = 0;
  bool active = true;
  int patience = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  ModelParams best_params;
  ModelParams local_params;
  long optimizer_steps = 0;

  static ClientState initial(std::size_t id, const ModelParams &init) {
    ClientState s;
    s.client_id = id;
    s.best_params = init;
    s.local_params = init;
    return s;
  }
};

/// Declarative description of a federation's language composition.
struct CompositionSpec {
  int num_languages = 8;
  double mono_fraction = 1.0;
  int train_per_client = 960;
  int val_per_client = 96;
  int test_per_language = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_languages < 2) throw ConfigError("num_languages must be >= 2");
    if (!(mono_fraction >= 0.0 && mono_fraction <= 1.0)) {
      throw ConfigError("mono_fraction must lie in [0, 1]");
    }
    if (train_per_client < num_languages) {
      throw ConfigError("train_per_client must be >= num_languages");
    }
    if (val_per_client < num_languages) {
      throw ConfigError("val_per_client must be >= num_languages");
    }
    if (test_per_language < 1) {
      throw ConfigError("test_per_language must be >= 1");
    }
  }
};

enum class StoppingMode { ldes, standard };

inline const char *to_string(StoppingMode mode) {
  return mode == StoppingMode::ldes ? "ldes" : "standard";
}

struct RoundRecord {
  int round_index = 0;
  bool validation = false;
  /// F_i(w^(t)) per client; empty on non-validation rounds.
  std::vector<double> per_client_val_loss;
  /// Client was training at the start of this round.
  std::vector<bool> active_mask;
  /// Client state after this round's validation phase.
  std::vector<bool> active_after;
  std::set<std::size_t> rejoin_events;
  std::set<std::size_t> stop_events;
  std::vector<long> steps;
  /// Mean distance between contributed params and the aggregate.
  double drift = 0.0;
  /// Factor-averaging vs product-averaging gap; 0 for dense params.
  double lowrank_gap = 0.0;
  /// Mean of per_client_val_loss, NaN on non-validation rounds.
  double mean_val_loss = std::numeric_limits<double>::quiet_NaN();

  long total_steps() const {
    long sum = 0;
    for (long s : steps) sum += s;
    return sum;
  }
};

struct RunResult {
  std::vector<RoundRecord> rounds;
  long total_optimizer_steps = 0;
  ModelParams final_params;
  int termination_round = 0;
  StoppingMode mode = StoppingMode::ldes;
  bool capped = false;
  /// Validation evaluations, counted separately from optimizer steps.
  long validation_evaluations = 0;
  std::vector<ClientState> final_states;
  /// Identify the data and trainer settings so runs can be compared.
  std::uint64_t data_fingerprint = 0;
  std::uint64_t train_fingerprint = 0;
};

}  // namespace ldesfl

#endif  // LDESFL_CORE_HPP_
