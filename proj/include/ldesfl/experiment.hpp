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

// Config-driven sweeps over compositions, stopping modes and seeds.
//
// A config is a JSON object; see configs/ for complete examples and README.md
// for every key. Each (composition, mode, seed) run writes
//
//   <output_dir>/<composition>/<mode>/<seed>/rounds.csv
//   <output_dir>/<composition>/<mode>/<seed>/timeline.csv
//   <output_dir>/<composition>/<mode>/<seed>/eval.json
//
// and the sweep writes <output_dir>/summary.csv and <output_dir>/manifest.json.
// Local baselines go under <output_dir>/local/<baseline>/<seed>/. All outputs
// are a pure function of the config: worker count and scheduling never show
// up in them.

#ifndef LDESFL_EXPERIMENT_HPP_
#define LDESFL_EXPERIMENT_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldesfl/core.hpp"
#include "ldesfl/datagen.hpp"
#include "ldesfl/federation.hpp"
#include "ldesfl/metrics.hpp"
#include "ldesfl/trainer.hpp"

namespace ldesfl {

enum class ModelKind { dense, low_rank };

struct FamilySettings {
  int num_languages = 8;
  int input_dim = 64;
  /// Per-language label noise; high-resource languages first.
  std::vector<double> noise_profile = {0.1,  0.1, 0.1, 0.75,
                                       0.75, 2.0, 2.0, 2.0};
  TaskKind task_kind = TaskKind::regression;
  double shared_scale = 1.0;
  double language_scale = 1.0;
  int language_block = 3;
};

struct ModelSettings {
  ModelKind kind = ModelKind::dense;
  int rank = 4;
  /// Fraction of the shared component placed in the initial (or frozen
  /// base) weights.
  double base_fraction = 0.5;
};

struct DataSettings {
  int train_per_client = 9600;
  int val_per_client = 192;
  int test_per_language = 512;
};

struct FederationSettings {
  std::vector<StoppingMode> modes = {StoppingMode::ldes,
                                     StoppingMode::standard};
  int p_max = 1;
  int global_patience = 1;
  int validation_interval = 5;
  int max_rounds = 2000;
};

struct BaselineSettings {
  bool local_mono = false;
  bool local_multi = false;
};

inline TrainConfig default_trainer() {
  TrainConfig t;
  t.steps_per_round = 10;
  t.batch_size = 16;
  t.learning_rate = 0.08;
  t.grad_clip_norm = 2.0;
  return t;
}

struct ExperimentConfig {
  FamilySettings family;
  ModelSettings model;
  DataSettings data;
  std::vector<double> compositions = {1.0, 0.85, 0.70, 0.50, 0.30, 0.15};
  FederationSettings federation;
  TrainConfig trainer = default_trainer();
  EarlyStopConfig early_stop;
  BaselineSettings baselines;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string output_dir = "runs";

  void validate() const;
};

namespace detail {

inline std::string join_path(const std::string &path, const std::string &key) {
  return path.empty() ? key : path + "." + key;
}

/// Reads one JSON object, remembering which keys were consumed so that
/// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json &node, std::string path)
      : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string &field,
                                const std::string &what) {
    throw ConfigError("config field '" + (field.empty() ? "<root>" : field) +
                      "': " + what);
  }

  const nlohmann::json *find(const std::string &key) {
    seen_.insert(key);
    const auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  std::string field(const std::string &key) const {
    return join_path(path_, key);
  }

  template <typename T>
  void read(const std::string &key, T &out) {
    const auto *v = find(key);
    if (v) out = convert<T>(*v, field(key));
  }

  template <typename T>
  static T convert(const nlohmann::json &v, const std::string &field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(field, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(field, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) fail(field, "expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(field, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(field, "expected a string");
      return v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  template <typename T>
  void read_list(const std::string &key, std::vector<T> &out) {
    const auto *v = find(key);
    if (!v) return;
    if (!v->is_array()) fail(field(key), "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      out.push_back(
          convert<T>((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
    }
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.count(it.key())) fail(field(it.key()), "unknown key");
    }
  }

 private:
  const nlohmann::json &node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline TaskKind parse_task_kind(const std::string &s, const std::string &field) {
  if (s == "regression") return TaskKind::regression;
  if (s == "classification") return TaskKind::classification;
  ObjectReader::fail(field, "expected \"regression\" or \"classification\"");
}

inline ModelKind parse_model_kind(const std::string &s,
                                  const std::string &field) {
  if (s == "dense") return ModelKind::dense;
  if (s == "low_rank") return ModelKind::low_rank;
  ObjectReader::fail(field, "expected \"dense\" or \"low_rank\"");
}

inline StoppingMode parse_mode(const std::string &s, const std::string &field) {
  if (s == "ldes") return StoppingMode::ldes;
  if (s == "standard") return StoppingMode::standard;
  ObjectReader::fail(field, "expected \"ldes\" or \"standard\"");
}

template <typename Fn>
void read_section(ObjectReader &parent, const std::string &key, Fn &&fn) {
  const auto *v = parent.find(key);
  if (!v) return;
  ObjectReader r(*v, parent.field(key));
  fn(r);
  r.finish();
}

inline std::string line_column(const std::string &text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  using detail::ObjectReader;
  if (compositions.empty()) ObjectReader::fail("compositions", "must not be empty");
  for (double s : compositions) {
    if (!(s >= 0.0 && s <= 1.0)) {
      ObjectReader::fail("compositions", "values must lie in [0, 1]");
    }
  }
  if (std::set<double>(compositions.begin(), compositions.end()).size() !=
      compositions.size()) {
    ObjectReader::fail("compositions", "values must be distinct");
  }
  if (seeds.empty()) ObjectReader::fail("seeds", "must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() !=
      seeds.size()) {
    ObjectReader::fail("seeds", "values must be distinct");
  }
  if (federation.modes.empty()) {
    ObjectReader::fail("federation.modes", "must not be empty");
  }
  if (family.num_languages < 1) {
    ObjectReader::fail("family.num_languages", "must be >= 1");
  }
  if (static_cast<int>(family.noise_profile.size()) != family.num_languages) {
    ObjectReader::fail("family.noise_profile",
                       "needs one entry per language");
  }
  if (model.rank < 1) ObjectReader::fail("model.rank", "must be >= 1");
  if (output_dir.empty()) ObjectReader::fail("output_dir", "must not be empty");
  try {
    trainer.validate();
  } catch (const ConfigError &e) {
    ObjectReader::fail("trainer", e.what());
  }
  try {
    early_stop.validate();
  } catch (const ConfigError &e) {
    ObjectReader::fail("early_stop", e.what());
  }
  if (federation.p_max < 1) ObjectReader::fail("federation.p_max", "must be >= 1");
  if (federation.global_patience < 1) {
    ObjectReader::fail("federation.global_patience", "must be >= 1");
  }
  if (federation.validation_interval < 1) {
    ObjectReader::fail("federation.validation_interval", "must be >= 1");
  }
  if (federation.max_rounds < 1) {
    ObjectReader::fail("federation.max_rounds", "must be >= 1");
  }
  CompositionSpec spec;
  spec.num_languages = family.num_languages;
  spec.train_per_client = data.train_per_client;
  spec.val_per_client = data.val_per_client;
  spec.test_per_language = data.test_per_language;
  try {
    spec.validate();
  } catch (const ConfigError &e) {
    ObjectReader::fail("data", e.what());
  }
}

/// Parses a config document. Syntax errors report line and column; field
/// errors name the offending key path.
inline ExperimentConfig parse_config(const std::string &text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw ConfigError("config syntax error at " +
                      detail::line_column(text, e.byte == 0 ? 0 : e.byte - 1) +
                      ": " + e.what());
  }
  ExperimentConfig cfg;
  detail::ObjectReader r(root, "");
  detail::read_section(r, "family", [&](detail::ObjectReader &f) {
    f.read("num_languages", cfg.family.num_languages);
    f.read("input_dim", cfg.family.input_dim);
    f.read_list("noise_profile", cfg.family.noise_profile);
    if (const auto *v = f.find("task_kind")) {
      const auto field = f.field("task_kind");
      cfg.family.task_kind = detail::parse_task_kind(
          detail::ObjectReader::convert<std::string>(*v, field), field);
    }
    f.read("shared_scale", cfg.family.shared_scale);
    f.read("language_scale", cfg.family.language_scale);
    f.read("language_block", cfg.family.language_block);
  });
  detail::read_section(r, "model", [&](detail::ObjectReader &m) {
    if (const auto *v = m.find("kind")) {
      const auto field = m.field("kind");
      cfg.model.kind = detail::parse_model_kind(
          detail::ObjectReader::convert<std::string>(*v, field), field);
    }
    m.read("rank", cfg.model.rank);
    m.read("base_fraction", cfg.model.base_fraction);
  });
  detail::read_section(r, "data", [&](detail::ObjectReader &d) {
    d.read("train_per_client", cfg.data.train_per_client);
    d.read("val_per_client", cfg.data.val_per_client);
    d.read("test_per_language", cfg.data.test_per_language);
  });
  r.read_list("compositions", cfg.compositions);
  detail::read_section(r, "federation", [&](detail::ObjectReader &f) {
    if (const auto *v = f.find("modes")) {
      const auto field = f.field("modes");
      if (!v->is_array()) detail::ObjectReader::fail(field, "expected an array");
      cfg.federation.modes.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        const auto item = field + "[" + std::to_string(i) + "]";
        cfg.federation.modes.push_back(detail::parse_mode(
            detail::ObjectReader::convert<std::string>((*v)[i], item), item));
      }
    }
    f.read("p_max", cfg.federation.p_max);
    f.read("global_patience", cfg.federation.global_patience);
    f.read("validation_interval", cfg.federation.validation_interval);
    f.read("max_rounds", cfg.federation.max_rounds);
  });
  detail::read_section(r, "trainer", [&](detail::ObjectReader &t) {
    t.read("steps_per_round", cfg.trainer.steps_per_round);
    t.read("batch_size", cfg.trainer.batch_size);
    t.read("learning_rate", cfg.trainer.learning_rate);
    if (const auto *v = t.find("grad_clip_norm")) {
      if (v->is_null()) {
        cfg.trainer.grad_clip_norm.reset();
      } else {
        cfg.trainer.grad_clip_norm = detail::ObjectReader::convert<double>(
            *v, t.field("grad_clip_norm"));
      }
    }
  });
  detail::read_section(r, "early_stop", [&](detail::ObjectReader &e) {
    e.read("patience", cfg.early_stop.patience);
    e.read("min_delta", cfg.early_stop.min_delta);
    e.read("eval_every", cfg.early_stop.eval_every);
    e.read("max_steps", cfg.early_stop.max_steps);
  });
  detail::read_section(r, "baselines", [&](detail::ObjectReader &b) {
    b.read("local_mono", cfg.baselines.local_mono);
    b.read("local_multi", cfg.baselines.local_multi);
  });
  r.read_list("seeds", cfg.seeds);
  r.read("output_dir", cfg.output_dir);
  r.finish();

  cfg.trainer.loss = cfg.family.task_kind == TaskKind::regression
                         ? LossKind::mse
                         : LossKind::cross_entropy;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string composition_label(double s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", s);
  return buf;
}

/// Command-line adjustments to a loaded config.
struct RunOverrides {
  std::vector<std::uint64_t> seeds;
  /// Output directory from the command line; wins over `env_output_dir`.
  std::string out;
  /// Restrict the sweep to these compositions (each must be configured).
  std::vector<double> only;
};

/// Applies overrides with precedence flag > environment > config file.
inline void apply_overrides(ExperimentConfig &cfg, const RunOverrides &o,
                            const char *env_output_dir) {
  if (env_output_dir && *env_output_dir) cfg.output_dir = env_output_dir;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (!o.only.empty()) {
    std::vector<double> kept;
    for (double s : o.only) {
      const auto it = std::find_if(
          cfg.compositions.begin(), cfg.compositions.end(),
          [&](double c) { return std::abs(c - s) < 1e-9; });
      if (it == cfg.compositions.end()) {
        throw ConfigError("--only " + composition_label(s) +
                          " is not in the composition list");
      }
      kept.push_back(*it);
    }
    cfg.compositions = kept;
  }
  cfg.validate();
}

inline TaskFamily make_family(const ExperimentConfig &cfg, std::uint64_t seed) {
  const auto &f = cfg.family;
  return generate_family(f.num_languages, f.input_dim, f.noise_profile,
                         f.task_kind, seed,
                         FamilyScales{f.shared_scale, f.language_scale,
                                      f.language_block});
}

struct ModelSetup {
  Model model = Model::dense(LossKind::mse);
  ModelParams init;
};

/// Builds the model and its initial params. The dense model starts at
/// base_fraction times the shared component. The low-rank model freezes that
/// vector as its base; A is drawn N(0, 1/d) and B starts at zero, so the
/// initial output equals the base.
inline ModelSetup make_model(const ExperimentConfig &cfg,
                             const TaskFamily &family, std::uint64_t seed) {
  const LossKind loss = cfg.trainer.loss;
  const Vector base = cfg.model.base_fraction * family.shared_component;
  ModelSetup setup;
  if (cfg.model.kind == ModelKind::dense) {
    setup.model = Model::dense(loss);
    setup.init = ModelParams::dense(base);
    return setup;
  }
  FrozenBase frozen;
  frozen.weights.push_back(base.transpose());
  setup.model = Model::low_rank(loss, std::move(frozen));
  auto rng = derived_rng({stream::init, seed});
  const Index d = family.input_dim;
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(d)));
  Matrix a(cfg.model.rank, d);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
  setup.init = ModelParams::low_rank({{a, Matrix::Zero(1, cfg.model.rank)}});
  return setup;
}

inline CompositionSpec composition_spec(const ExperimentConfig &cfg,
                                        double mono_fraction,
                                        std::uint64_t seed) {
  CompositionSpec spec;
  spec.num_languages = cfg.family.num_languages;
  spec.mono_fraction = mono_fraction;
  spec.train_per_client = cfg.data.train_per_client;
  spec.val_per_client = cfg.data.val_per_client;
  spec.test_per_language = cfg.data.test_per_language;
  spec.seed = seed;
  return spec;
}

inline FederationConfig federation_config(const ExperimentConfig &cfg,
                                          StoppingMode mode,
                                          const ModelParams &init,
                                          std::uint64_t seed) {
  FederationConfig fc;
  fc.mode = mode;
  fc.p_max = cfg.federation.p_max;
  fc.global_patience = cfg.federation.global_patience;
  fc.validation_interval = cfg.federation.validation_interval;
  fc.max_rounds = cfg.federation.max_rounds;
  fc.train = cfg.trainer;
  fc.init_params = init;
  fc.seed = seed;
  return fc;
}

enum class RunKind { federated, local_mono, local_multi };

inline const char *to_string(RunKind kind) {
  switch (kind) {
    case RunKind::federated: return "federated";
    case RunKind::local_mono: return "local_mono";
    case RunKind::local_multi: return "local_multi";
  }
  return "?";
}

struct RunKey {
  RunKind kind = RunKind::federated;
  double composition = 1.0;
  StoppingMode mode = StoppingMode::ldes;
  std::uint64_t seed = 0;

  std::string mode_label() const {
    return kind == RunKind::federated ? to_string(mode) : to_string(kind);
  }
  std::string composition_label() const {
    return kind == RunKind::federated ? ldesfl::composition_label(composition)
                                      : "local";
  }
  std::filesystem::path relative_dir() const {
    return std::filesystem::path(composition_label()) / mode_label() /
           std::to_string(seed);
  }
};

/// Summary-table order: composition descending, then mode, then seed, with
/// the local baselines after every federated run.
inline bool summary_order(const RunKey &a, const RunKey &b) {
  if (a.kind != b.kind) return a.kind < b.kind;
  if (a.composition != b.composition) return a.composition > b.composition;
  if (a.kind == RunKind::federated && a.mode != b.mode) {
    return std::string(to_string(a.mode)) < to_string(b.mode);
  }
  return a.seed < b.seed;
}

struct RunOutcome {
  RunKey key;
  bool failed = false;
  std::string error;
  bool capped = false;
  EvalReport report;
  long total_steps = 0;
  int rejoin_count = 0;
  int termination_round = 0;
  /// Present for federated runs only.
  std::optional<RunResult> run;
};

namespace detail {

inline void write_file(const std::filesystem::path &path,
                       const std::string &content) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << content;
}

inline std::string join_ids(const std::set<std::size_t> &ids) {
  std::string s;
  for (auto id : ids) {
    if (!s.empty()) s += ';';
    s += std::to_string(id);
  }
  return s;
}

}  // namespace detail

/// rounds.csv: one row per round. Validation-only columns are empty on other
/// rounds; stop and rejoin events are ';'-separated client ids.
inline std::string rounds_csv(const RunResult &run) {
  std::ostringstream out;
  const std::size_t k = run.rounds.empty() ? 0 : run.rounds.front().active_mask.size();
  out << "round,validation,active_clients,steps,drift,lowrank_gap,mean_val_loss";
  for (std::size_t i = 0; i < k; ++i) out << ",val_loss_" << i;
  out << ",stop_events,rejoin_events\n";
  for (const auto &r : run.rounds) {
    out << r.round_index << ',' << (r.validation ? 1 : 0) << ','
        << std::count(r.active_mask.begin(), r.active_mask.end(), true) << ','
        << r.total_steps() << ',' << format_double(r.drift) << ','
        << format_double(r.lowrank_gap) << ',';
    if (r.validation) out << format_double(r.mean_val_loss);
    for (std::size_t i = 0; i < k; ++i) {
      out << ',';
      if (r.validation) out << format_double(r.per_client_val_loss[i]);
    }
    out << ',' << detail::join_ids(r.stop_events) << ','
        << detail::join_ids(r.rejoin_events) << '\n';
  }
  return out.str();
}

/// timeline.csv: 1 where a client trained in that round, 0 where it idled.
inline std::string timeline_csv(const RunResult &run) {
  const auto tl = build_timeline(run);
  std::ostringstream out;
  const std::size_t k = tl.rejoin_counts.size();
  out << "round";
  for (std::size_t i = 0; i < k; ++i) out << ",client_" << i;
  out << '\n';
  for (std::size_t r = 0; r < tl.rounds(); ++r) {
    out << run.rounds[r].round_index;
    for (std::size_t i = 0; i < k; ++i) out << ',' << (tl.training[r][i] ? 1 : 0);
    out << '\n';
  }
  return out.str();
}

inline nlohmann::ordered_json eval_json(const RunOutcome &o) {
  nlohmann::ordered_json j;
  j["composition"] = o.key.composition_label();
  j["mode"] = o.key.mode_label();
  j["seed"] = o.key.seed;
  j["status"] = o.failed ? "failed" : "completed";
  if (o.failed) {
    j["error"] = o.error;
    return j;
  }
  auto doubles = [](const std::vector<double> &v) {
    auto arr = nlohmann::ordered_json::array();
    for (double x : v) arr.push_back(format_double(x));
    return arr;
  };
  // Doubles are written as "%.17g" strings so files round-trip bit-exactly.
  j["per_language"] = doubles(o.report.per_language);
  j["per_language_loss"] = doubles(o.report.per_language_loss);
  j["mean"] = format_double(o.report.mean);
  j["sigma"] = format_double(o.report.sigma);
  j["total_steps"] = o.total_steps;
  j["capped"] = o.capped;
  if (o.run) {
    const auto tl = build_timeline(*o.run);
    j["termination_round"] = o.termination_round;
    j["validation_evaluations"] = o.run->validation_evaluations;
    j["rejoin_count"] = o.rejoin_count;
    j["rejoin_counts"] = tl.rejoin_counts;
  }
  return j;
}

/// Runs one federated configuration.
inline RunOutcome run_federated(const ExperimentConfig &cfg, const RunKey &key) {
  RunOutcome o;
  o.key = key;
  try {
    const auto family = make_family(cfg, key.seed);
    const auto setup = make_model(cfg, family, key.seed);
    const auto data =
        make_federation(family, composition_spec(cfg, key.composition, key.seed));
    auto run = run_federation(setup.model, data,
                              federation_config(cfg, key.mode, setup.init, key.seed));
    o.report = evaluate_global(setup.model, run.final_params, data.server_test);
    o.total_steps = run.total_optimizer_steps;
    o.capped = run.capped;
    o.rejoin_count = total_rejoins(run);
    o.termination_round = run.termination_round;
    o.run = std::move(run);
  } catch (const Error &e) {
    o.failed = true;
    o.error = e.what();
  }
  return o;
}

/// Runs a local baseline on the fully monolingual partition. local_mono fits
/// one model per language on that language's data and scores each on its
/// own language; local_multi fits one model on the pooled data. Both stop
/// with the early_stop settings, evaluating once per client-sized pass.
inline RunOutcome run_local(const ExperimentConfig &cfg, const RunKey &key) {
  RunOutcome o;
  o.key = key;
  try {
    const auto family = make_family(cfg, key.seed);
    const auto setup = make_model(cfg, family, key.seed);
    const auto data = make_federation(family, composition_spec(cfg, 1.0, key.seed));
    const auto pass = static_cast<std::size_t>(cfg.data.train_per_client);
    if (key.kind == RunKind::local_multi) {
      const auto fit =
          centralized_fit(setup.model, setup.init, pooled_train(data),
                          pooled_val(data), cfg.trainer, cfg.early_stop,
                          key.seed, pass);
      o.report = evaluate_global(setup.model, fit.params, data.server_test);
      o.total_steps = fit.total_steps;
      o.capped = fit.capped;
    } else {
      std::vector<double> metric, loss;
      for (std::size_t c = 0; c < data.clients.size(); ++c) {
        const auto &client = data.clients[c];
        const auto fit = centralized_fit(setup.model, setup.init, client.train,
                                         client.val, cfg.trainer,
                                         cfg.early_stop, key.seed ^ (c + 1), pass);
        const auto e = evaluate(setup.model, fit.params,
                                data.server_test[client.dominant_language]);
        metric.push_back(e.metric);
        loss.push_back(e.loss);
        o.total_steps += fit.total_steps;
        o.capped = o.capped || fit.capped;
      }
      o.report = make_report(std::move(metric), std::move(loss));
    }
  } catch (const Error &e) {
    o.failed = true;
    o.error = e.what();
  }
  return o;
}

/// Every run a config asks for, in summary order.
inline std::vector<RunKey> planned_runs(const ExperimentConfig &cfg) {
  std::vector<RunKey> keys;
  for (double s : cfg.compositions) {
    for (auto mode : cfg.federation.modes) {
      for (auto seed : cfg.seeds) {
        keys.push_back({RunKind::federated, s, mode, seed});
      }
    }
  }
  for (auto seed : cfg.seeds) {
    if (cfg.baselines.local_mono) keys.push_back({RunKind::local_mono, 1.0, {}, seed});
    if (cfg.baselines.local_multi) keys.push_back({RunKind::local_multi, 1.0, {}, seed});
  }
  std::stable_sort(keys.begin(), keys.end(), summary_order);
  return keys;
}

/// summary.csv: one row per run in summary order. normalized_steps divides
/// by the largest step total among completed runs.
inline std::string summary_csv(const std::vector<RunOutcome> &outcomes,
                               int num_languages) {
  std::vector<const RunOutcome *> rows;
  for (const auto &o : outcomes) rows.push_back(&o);
  std::stable_sort(rows.begin(), rows.end(), [](const auto *a, const auto *b) {
    return summary_order(a->key, b->key);
  });
  long max_steps = 0;
  for (const auto *o : rows) {
    if (!o->failed) max_steps = std::max(max_steps, o->total_steps);
  }
  std::ostringstream out;
  out << "composition,mode,seed";
  for (int k = 0; k < num_languages; ++k) out << ",score_" << k;
  out << ",mean,sigma,total_steps,normalized_steps,rejoin_count,capped,status\n";
  for (const auto *o : rows) {
    out << o->key.composition_label() << ',' << o->key.mode_label() << ','
        << o->key.seed;
    if (o->failed) {
      for (int k = 0; k < num_languages + 6; ++k) out << ',';
      out << ",failed\n";
      continue;
    }
    for (double v : o->report.per_language) out << ',' << format_double(v);
    const double normalized =
        max_steps > 0 ? double(o->total_steps) / double(max_steps) : 0.0;
    out << ',' << format_double(o->report.mean) << ','
        << format_double(o->report.sigma) << ',' << o->total_steps << ','
        << format_double(normalized) << ',' << o->rejoin_count << ','
        << (o->capped ? 1 : 0) << ",completed\n";
  }
  return out.str();
}

/// Writes summary.csv under `dir`.
inline void emit_summary(const std::vector<RunOutcome> &outcomes,
                         int num_languages, const std::filesystem::path &dir) {
  detail::write_file(dir / "summary.csv", summary_csv(outcomes, num_languages));
}

struct ExperimentResult {
  std::vector<RunOutcome> outcomes;
  std::filesystem::path output_dir;

  bool all_ok() const {
    return std::all_of(outcomes.begin(), outcomes.end(), [](const auto &o) {
      return !o.failed && !o.capped;
    });
  }
};

/// Runs every planned run on up to `workers` threads and writes all
/// artifacts.
inline ExperimentResult run_experiment(const ExperimentConfig &cfg,
                                       int workers = 1) {
  cfg.validate();
  if (workers < 1) throw ConfigError("workers must be >= 1");
  const auto keys = planned_runs(cfg);
  ExperimentResult result;
  result.output_dir = cfg.output_dir;
  result.outcomes.resize(keys.size());

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < keys.size(); i = next++) {
      result.outcomes[i] = keys[i].kind == RunKind::federated
                               ? run_federated(cfg, keys[i])
                               : run_local(cfg, keys[i]);
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(workers),
                                         keys.size());
    for (std::size_t w = 1; w < n; ++w) pool.emplace_back(work);
    work();
  }

  const std::filesystem::path root = cfg.output_dir;
  nlohmann::ordered_json manifest;
  manifest["runs"] = nlohmann::ordered_json::array();
  for (const auto &o : result.outcomes) {
    const auto dir = root / o.key.relative_dir();
    if (o.run) {
      detail::write_file(dir / "rounds.csv", rounds_csv(*o.run));
      detail::write_file(dir / "timeline.csv", timeline_csv(*o.run));
    }
    detail::write_file(dir / "eval.json", eval_json(o).dump(2) + "\n");
    nlohmann::ordered_json entry;
    entry["composition"] = o.key.composition_label();
    entry["mode"] = o.key.mode_label();
    entry["seed"] = o.key.seed;
    entry["path"] = o.key.relative_dir().generic_string();
    entry["status"] = o.failed ? "failed" : "completed";
    entry["capped"] = o.capped;
    if (o.failed) entry["error"] = o.error;
    manifest["runs"].push_back(std::move(entry));
  }
  manifest["all_ok"] = result.all_ok();
  detail::write_file(root / "manifest.json", manifest.dump(2) + "\n");

  emit_summary(result.outcomes, cfg.family.num_languages, root);
  return result;
}

}  // namespace ldesfl

#endif  // LDESFL_EXPERIMENT_HPP_
