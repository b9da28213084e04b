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

// Command-line front end.
//
//   ldesfl run <config> [--seeds 1,2,3] [--workers N] [--out DIR]
//                       [--only COMPOSITION]
//   ldesfl export <config> --seed N --composition S --out DIR
//
// `run` exits 0 iff every run completed without failing or hitting its cap,
// 1 otherwise, and 2 on a bad config or command line. LDESFL_OUTPUT_DIR
// overrides the config's output_dir; --out overrides both.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ldesfl/experiment.hpp"

namespace {

int run_command(const std::string &config_path,
                const std::vector<std::uint64_t> &seeds, int workers,
                const std::string &out, const std::vector<double> &only) {
  auto cfg = ldesfl::load_config(config_path);
  ldesfl::apply_overrides(cfg, {seeds, out, only},
                          std::getenv("LDESFL_OUTPUT_DIR"));

  const auto result = ldesfl::run_experiment(cfg, workers);
  int failed = 0, capped = 0;
  for (const auto &o : result.outcomes) {
    if (o.failed) {
      ++failed;
      std::cerr << "run " << o.key.relative_dir().generic_string()
                << " failed: " << o.error << "\n";
    } else if (o.capped) {
      ++capped;
      std::cerr << "run " << o.key.relative_dir().generic_string()
                << " hit its step or round cap\n";
    }
  }
  std::cout << result.outcomes.size() << " runs, " << failed << " failed, "
            << capped << " capped; summary at "
            << (result.output_dir / "summary.csv").string() << "\n";
  return result.all_ok() ? 0 : 1;
}

void write_set(const std::filesystem::path &path, const ldesfl::LabeledSet &set) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ldesfl::Error("cannot write '" + path.string() + "'");
  out << "id,language";
  const auto d = set.empty() ? 0 : set.samples.front().x.size();
  for (ldesfl::Index i = 0; i < d; ++i) out << ",x_" << i;
  out << ",y\n";
  ldesfl::write_records(out, set);
}

int export_command(const std::string &config_path, std::uint64_t seed,
                   double composition, const std::string &out) {
  const auto cfg = ldesfl::load_config(config_path);
  const auto family = ldesfl::make_family(cfg, seed);
  const auto data = ldesfl::make_federation(
      family, ldesfl::composition_spec(cfg, composition, seed));
  const std::filesystem::path dir = out;
  std::filesystem::create_directories(dir);
  for (std::size_t c = 0; c < data.clients.size(); ++c) {
    const auto id = std::to_string(c);
    write_set(dir / ("client_" + id + "_train.csv"), data.clients[c].train);
    write_set(dir / ("client_" + id + "_val.csv"), data.clients[c].val);
  }
  for (std::size_t k = 0; k < data.server_test.size(); ++k) {
    write_set(dir / ("test_" + std::to_string(k) + ".csv"), data.server_test[k]);
  }
  std::cout << "wrote " << data.clients.size() << " clients and "
            << data.server_test.size() << " test sets to " << dir.string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Federated fine-tuning simulator with local dynamic early stopping"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::uint64_t> seeds;
  int workers = 1;
  std::string out;
  std::vector<double> only;
  auto *run = app.add_subcommand("run", "Run every configured sweep");
  run->add_option("config", config, "Config file (JSON)")->required();
  run->add_option("--seeds", seeds, "Seeds overriding the config list")
      ->delimiter(',');
  run->add_option("--workers", workers, "Concurrent runs")
      ->check(CLI::PositiveNumber);
  run->add_option("--out", out, "Output directory");
  run->add_option("--only", only, "Run only these compositions")->delimiter(',');

  std::uint64_t export_seed = 1;
  double export_composition = 1.0;
  std::string export_out;
  auto *exp = app.add_subcommand("export", "Write one federation's samples as CSV");
  exp->add_option("config", config, "Config file (JSON)")->required();
  exp->add_option("--seed", export_seed, "Seed")->required();
  exp->add_option("--composition", export_composition, "Monolingual share")
      ->required();
  exp->add_option("--out", export_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return run_command(config, seeds, workers, out, only);
    return export_command(config, export_seed, export_composition, export_out);
  } catch (const ldesfl::ConfigError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
