// Copyright 2026 The FedASK Simulator Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end. Exit status: 0 success, 2 configuration error,
// 3 degenerate math (a round that could not complete after its retries),
// 1 anything else.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedask/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDegenerate = 3;

std::filesystem::path default_out() {
  if (const char* env = std::getenv(fedask::kOutDirEnv); env && *env) return env;
  return fedask::kDefaultOutDir;
}

int cmd_run(const std::string& config, const std::vector<std::string>& sets) {
  const auto cfg = fedask::load_config(config, sets);
  const auto runs = fedask::run_experiment(cfg);
  for (const auto& r : runs) {
    std::cout << "p=" << r.oversketch << " rounds=" << r.reports.size();
    if (!r.reports.empty()) {
      const auto& f = r.reports.back();
      std::cout << " cosine=" << fedask::format_real(f.cosine)
                << " loss=" << fedask::format_real(f.loss)
                << " epsilon=" << fedask::format_real(f.spend.epsilon);
    }
    std::cout << " -> " << r.dir.string() << "\n";
  }
  return kExitOk;
}

int cmd_grid(const std::string& out) {
  const std::filesystem::path dir = out.empty() ? default_out() : std::filesystem::path(out);
  const auto cells = fedask::reproduce_fidelity_grid(dir);
  std::cout << cells.size() << " cells -> " << (dir / "fidelity_grid.csv").string() << "\n";
  return kExitOk;
}

int cmd_noise(const std::string& out) {
  const std::filesystem::path dir = out.empty() ? default_out() : std::filesystem::path(out);
  const auto r = fedask::reproduce_noise_study(dir);
  std::cout << "ratio slope predicted=" << fedask::format_real(r.predicted_slope)
            << " empirical=" << fedask::format_real(r.empirical_slope) << " -> "
            << (dir / "noise_study.csv").string() << "\n";
  return kExitOk;
}

int cmd_account(const std::string& config, const std::vector<std::string>& sets) {
  const auto cfg = fedask::load_config(config, sets);
  std::cout << fedask::account(cfg).dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedASK differentially private federated LoRA simulator"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> sets;
  std::string out;

  auto* run = app.add_subcommand("run", "Train the configured method and write reports");
  run->add_option("--config", config, "JSON configuration")->required();
  run->add_option("--set", sets, "Override a field, e.g. --set dp.clip=2")->take_all();

  auto* grid = app.add_subcommand("fidelity-grid", "Aggregation fidelity over K_s x heterogeneity");
  grid->add_option("--out", out, "Output directory (default: $FEDASK_OUT_DIR)");

  auto* noise = app.add_subcommand("noise-study", "Noise power of both-factor vs B-only noise");
  noise->add_option("--out", out, "Output directory (default: $FEDASK_OUT_DIR)");

  auto* acct = app.add_subcommand("account", "Print the privacy spend without training");
  acct->add_option("--config", config, "JSON configuration")->required();
  acct->add_option("--set", sets, "Override a field")->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, sets);
    if (*grid) return cmd_grid(out);
    if (*noise) return cmd_noise(out);
    if (*acct) return cmd_account(config, sets);
  } catch (const fedask::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedask::DegenerateInputError& e) {
    std::cerr << "degenerate: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const fedask::ClientDropout& e) {
    std::cerr << "round failed: client " << e.client_id() << " dropped on every retry\n";
    return kExitDegenerate;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
