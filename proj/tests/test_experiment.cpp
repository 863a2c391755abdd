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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedask/experiment.hpp"

using fedask::ConfigError;
using fedask::ExperimentConfig;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fedask_exp_" + name);
  std::filesystem::remove_all(p);
  return p;
}

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.seed = 5;
  c.clients = 5;
  c.client_sampling_ratio = 0.6;
  c.rounds = 3;
  c.samples_per_client = 20;
  c.task = {12, 12, 2, 3, 1.0, 0.0};
  c.rank = 2;
  c.alpha = 2.0;
  c.oversketch = 2;
  c.local_steps = 4;
  return c;
}

std::string field_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST(Config, RoundTrip) {
  ExperimentConfig c = tiny();
  c.dirichlet_alpha = std::numeric_limits<double>::infinity();
  c.p_sweep = {0, 2, 4};
  c.dp_enabled = true;
  c.target_epsilon = 3.0;
  c.learning_rate = 0.1 + 0.2;  // not exactly representable as a short decimal
  EXPECT_EQ(fedask::parse_config(fedask::emit_config(c)), c);
  EXPECT_EQ(fedask::parse_config(fedask::emit_config(ExperimentConfig{})), ExperimentConfig{});
}

TEST(Config, DefaultsMatchDeskScale) {
  const ExperimentConfig c;
  EXPECT_EQ(c.task.out_dim, 64u);
  EXPECT_EQ(c.rank, 4u);
  EXPECT_EQ(c.oversketch, 2u);
  EXPECT_EQ(c.clients, 10u);
  EXPECT_DOUBLE_EQ(c.client_sampling_ratio, 0.2);
  EXPECT_EQ(c.rounds, 200u);
  EXPECT_EQ(c.local_steps, 10u);
  EXPECT_EQ(c.batch_size, 8u);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(field_of([] { fedask::parse_config(R"({"clients": 0})"); }), "clients");
  EXPECT_EQ(field_of([] { fedask::parse_config(R"({"dp": {"clip": -1}})"); }), "dp.clip");
  EXPECT_EQ(field_of([] { fedask::parse_config(R"({"task": {"oops": 1}})"); }), "task.oops");
  EXPECT_EQ(field_of([] { fedask::parse_config(R"({"local": {"steps": "ten"}})"); }),
            "local.steps");
  EXPECT_EQ(field_of([] { fedask::parse_config(R"({"method": "scaffold"})"); }), "method");
  EXPECT_EQ(field_of([] { fedask::parse_config("{not json"); }), "<document>");
  EXPECT_EQ(field_of([] {
              fedask::parse_config(R"({"sketch": {"oversketch": 80}})");
            }),
            "sketch.oversketch");
}

TEST(Config, DpNeedsExactlyOneNoiseSource) {
  EXPECT_EQ(field_of([] { fedask::parse_config(R"({"dp": {"enabled": true}})"); }), "dp");
  EXPECT_EQ(field_of([] {
              fedask::parse_config(
                  R"({"dp": {"enabled": true, "noise_multiplier": 1, "target_epsilon": 2}})");
            }),
            "dp");
  EXPECT_NO_THROW(fedask::parse_config(R"({"dp": {"enabled": true, "noise_multiplier": 1}})"));
}

TEST(Config, OverridesUseDottedPaths) {
  nlohmann::ordered_json doc = fedask::config_to_json(tiny());
  fedask::apply_override(doc, "dp.clip=2.5");
  fedask::apply_override(doc, "method=ffa");
  fedask::apply_override(doc, "dirichlet_alpha=iid");
  fedask::apply_override(doc, "sketch.p_sweep=[0,2]");
  const auto c = fedask::config_from_json(doc);
  EXPECT_DOUBLE_EQ(c.clip, 2.5);
  EXPECT_EQ(c.method, fedask::Method::kFfa);
  EXPECT_TRUE(std::isinf(c.dirichlet_alpha));
  EXPECT_EQ(c.p_sweep, (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(fedask::apply_override(doc, "novalue"), ConfigError);
}

TEST(Config, TargetEpsilonCalibratesSigma) {
  ExperimentConfig c = tiny();
  c.dp_enabled = true;
  c.target_epsilon = 2.0;
  const double s2 = fedask::effective_sigma(c);
  c.target_epsilon = 4.0;
  const double s4 = fedask::effective_sigma(c);
  EXPECT_NEAR(s2 / s4, 2.0, 1e-12);  // sigma^2 scales with 1/eps^2
}

TEST(Run, ZeroRoundsWritesHeaderOnly) {
  ExperimentConfig c = tiny();
  c.rounds = 0;
  c.output = scratch("zero").string();
  const auto runs = fedask::run_experiment(c);
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(slurp(std::filesystem::path(c.output) / "report.csv"),
            std::string(fedask::kReportHeader) + "\n");
  std::filesystem::remove_all(c.output);
}

TEST(Run, RerunIsByteIdentical) {
  ExperimentConfig c = tiny();
  c.dp_enabled = true;
  c.noise_multiplier = 0.1;
  c.output = scratch("a").string();
  fedask::run_experiment(c);
  const std::string first = slurp(std::filesystem::path(c.output) / "report.csv");
  const std::string first_json = slurp(std::filesystem::path(c.output) / "summary.json");
  c.output = scratch("b").string();
  fedask::run_experiment(c);
  EXPECT_EQ(slurp(std::filesystem::path(c.output) / "report.csv"), first);
  EXPECT_EQ(slurp(std::filesystem::path(c.output) / "summary.json"), first_json);
  std::filesystem::remove_all(scratch("a"));
  std::filesystem::remove_all(c.output);
}

TEST(Run, EnvironmentSuppliesDefaultOutput) {
  ExperimentConfig c = tiny();
  c.rounds = 1;
  const auto dir = scratch("env");
  ::setenv(fedask::kOutDirEnv, dir.string().c_str(), 1);
  fedask::run_experiment(c);
  ::unsetenv(fedask::kOutDirEnv);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  std::filesystem::remove_all(dir);
}

TEST(Run, PSweepWritesSubdirsAndStaysExact) {
  ExperimentConfig c = tiny();
  c.rounds = 2;
  c.p_sweep = {0, 2, 4, 8};
  c.output = scratch("psweep").string();
  const auto runs = fedask::run_experiment(c);
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) {
    EXPECT_TRUE(std::filesystem::exists(r.dir / "report.csv"));
    for (const auto& rep : r.reports) EXPECT_GE(rep.cosine, 1.0 - 1e-6) << "p=" << r.oversketch;
  }
  std::filesystem::remove_all(c.output);
}

TEST(Run, FedAskFidelityNotBelowFedAvg) {
  ExperimentConfig c = tiny();
  c.rounds = 50;
  c.dirichlet_alpha = 0.1;
  c.eval_every = 50;
  const auto ask = fedask::simulate(c, c.oversketch);
  c.method = fedask::Method::kFedAvg;
  const auto avg = fedask::simulate(c, 0);
  EXPECT_GE(ask.reports.back().cosine, avg.reports.back().cosine);
}

TEST(Account, ReportsSpendWithoutTraining) {
  ExperimentConfig c = tiny();
  c.dp_enabled = true;
  c.noise_multiplier = 2.0;
  const auto j = fedask::account(c);
  EXPECT_GT(j["epsilon"].get<double>(), 0.0);
  EXPECT_TRUE(j.contains("alpha_opt"));
  EXPECT_TRUE(j.contains("per_round_epsilon"));
  EXPECT_DOUBLE_EQ(j["sigma"].get<double>(), 2.0);
  c.dp_enabled = false;
  c.noise_multiplier.reset();
  EXPECT_TRUE(fedask::account(c)["epsilon"].is_null());
}

TEST(NoiseStudy, ZeroSigmaTrajectoriesIdenticalAndBOnlyHasNoQuadratic) {
  fedask::NoiseStudyOptions o;
  o.trials = 300;
  o.sigmas = {0.0, 2.0};
  const auto r = fedask::noise_study(o);
  EXPECT_TRUE(r.identical_at_zero);
  for (const auto& row : r.rows) {
    if (row.scheme == fedask::NoiseScheme::kBOnly) {
      EXPECT_EQ(row.predicted.quadratic_term, 0.0);
    }
  }
}

TEST(Grid, SmallGridShape) {
  fedask::GridOptions o;
  o.clients_per_round = {2, 3};
  o.dirichlet_alphas = {0.5, std::numeric_limits<double>::infinity()};
  o.local_steps = 5;
  const auto dir = scratch("grid");
  const auto cells = fedask::reproduce_fidelity_grid(dir, o);
  EXPECT_EQ(cells.size(), 4u);
  for (const auto& c : cells) EXPECT_GE(c.fedask_cosine, 1.0 - 1e-6);
  EXPECT_TRUE(std::filesystem::exists(dir / "fidelity_grid.csv"));
  std::filesystem::remove_all(dir);
}
