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

// Experiment configuration and the drivers behind the command-line tool.

#ifndef FEDASK_EXPERIMENT_HPP_
#define FEDASK_EXPERIMENT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedask/adapter.hpp"
#include "fedask/error.hpp"
#include "fedask/federation.hpp"
#include "fedask/metrics.hpp"
#include "fedask/privacy.hpp"
#include "json.hpp"

namespace fedask {

inline constexpr const char* kOutDirEnv = "FEDASK_OUT_DIR";
inline constexpr const char* kDefaultOutDir = "fedask-out";

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output;  // empty: $FEDASK_OUT_DIR, then "fedask-out"
  Method method = Method::kFedAsk;
  std::size_t clients = 10;
  double client_sampling_ratio = 0.2;
  std::size_t rounds = 200;
  std::size_t samples_per_client = 64;
  double dirichlet_alpha = 0.5;  // +inf is IID, written "iid"

  TaskShape task;

  std::size_t rank = 4;
  double alpha = 4.0;

  std::size_t oversketch = 2;
  std::vector<std::size_t> p_sweep;
  bool resample_omega = false;

  std::size_t local_steps = 10;
  double learning_rate = 0.02;
  std::size_t batch_size = 8;

  bool dp_enabled = false;
  double clip = 1.0;
  std::optional<double> noise_multiplier;
  std::optional<double> target_epsilon;
  double delta = 1e-5;
  double data_sampling_ratio = 0.125;
  double rdp_constant = 1.0;    // constant in the per-step RDP bound
  double sigma_constant = 1.0;  // constant in the sigma calibration

  std::size_t workers = 1;
  double bytes_per_element = 2.0;
  double dropout_probability = 0.0;
  std::size_t max_retries = 3;
  std::size_t eval_every = 1;

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

using Json = nlohmann::ordered_json;

inline void reject_unknown(const Json& j, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where.empty() ? "<root>" : where, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool ok = std::any_of(known.begin(), known.end(),
                                [&](const char* k) { return it.key() == k; });
    if (!ok) {
      throw ConfigError(where.empty() ? it.key() : where + "." + it.key(), "unknown field");
    }
  }
}

template <typename T>
void read_field(const Json& j, const char* key, const std::string& where, T& out) {
  if (!j.contains(key)) return;
  const std::string name = where.empty() ? key : where + "." + key;
  try {
    const Json& v = j.at(key);
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw ConfigError(name, "expected a non-negative integer");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(name, "expected a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name, "expected true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name, "expected a string");
    }
    out = v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(name, e.what());
  }
}

inline void read_optional(const Json& j, const char* key, const std::string& where,
                          std::optional<double>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  double v = 0.0;
  read_field(j, key, where, v);
  out = v;
}

inline Json optional_json(const std::optional<double>& v) {
  return v ? Json(*v) : Json(nullptr);
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const char* field, const char* msg) {
    if (!ok) throw ConfigError(field, msg);
  };
  need(c.clients >= 1, "clients", "must be >= 1");
  need(c.client_sampling_ratio > 0.0 && c.client_sampling_ratio <= 1.0,
       "client_sampling_ratio", "must lie in (0, 1]");
  need(c.samples_per_client >= 1, "samples_per_client", "must be >= 1");
  need(c.dirichlet_alpha > 0.0, "dirichlet_alpha", "must be > 0 or \"iid\"");
  need(c.method == Method::kFedAsk || c.method == Method::kFedAvg || c.method == Method::kFfa,
       "method", "must be fedask, fedavg or ffa");
  need(c.task.out_dim >= 1, "task.out_dim", "must be >= 1");
  need(c.task.in_dim >= 1, "task.in_dim", "must be >= 1");
  need(c.task.planted_rank >= 1 &&
           c.task.planted_rank <= std::min(c.task.out_dim, c.task.in_dim),
       "task.planted_rank", "must lie in [1, min(out_dim, in_dim)]");
  need(c.task.components >= 1, "task.components", "must be >= 1");
  need(c.task.shift_magnitude >= 0.0, "task.shift_magnitude", "must be >= 0");
  need(c.task.label_noise >= 0.0, "task.label_noise", "must be >= 0");
  need(c.rank >= 1 && c.rank <= std::min(c.task.out_dim, c.task.in_dim), "adapter.rank",
       "must lie in [1, min(out_dim, in_dim)]");
  need(c.alpha > 0.0, "adapter.alpha", "must be > 0");
  need(c.rank + c.oversketch <= c.task.out_dim, "sketch.oversketch",
       "rank + oversketch must not exceed out_dim");
  for (std::size_t p : c.p_sweep) {
    need(c.rank + p <= c.task.out_dim, "sketch.p_sweep",
         "rank + p must not exceed out_dim for every entry");
  }
  need(c.local_steps >= 1, "local.steps", "must be >= 1");
  need(c.learning_rate > 0.0, "local.learning_rate", "must be > 0");
  need(c.batch_size >= 1, "local.batch_size", "must be >= 1");
  if (c.dp_enabled) {
    need(c.noise_multiplier.has_value() != c.target_epsilon.has_value(), "dp",
         "set exactly one of noise_multiplier and target_epsilon");
    need(c.method != Method::kFedAvg, "method", "fedavg runs without dp only");
    need(!c.noise_multiplier || *c.noise_multiplier >= 0.0, "dp.noise_multiplier",
         "must be >= 0");
    need(!c.target_epsilon || *c.target_epsilon > 0.0, "dp.target_epsilon", "must be > 0");
  }
  need(c.clip > 0.0, "dp.clip", "must be > 0");
  need(c.delta > 0.0 && c.delta < 1.0, "dp.delta", "must lie in (0, 1)");
  need(c.data_sampling_ratio > 0.0 && c.data_sampling_ratio <= 1.0,
       "dp.data_sampling_ratio", "must lie in (0, 1]");
  need(c.rdp_constant > 0.0, "dp.rdp_constant", "must be > 0");
  need(c.sigma_constant > 0.0, "dp.sigma_constant", "must be > 0");
  need(c.workers >= 1, "runtime.workers", "must be >= 1");
  need(c.bytes_per_element > 0.0, "runtime.bytes_per_element", "must be > 0");
  need(c.dropout_probability >= 0.0 && c.dropout_probability < 1.0,
       "runtime.dropout_probability", "must lie in [0, 1)");
  need(c.eval_every >= 1, "runtime.eval_every", "must be >= 1");
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  detail::Json j;
  j["seed"] = c.seed;
  j["output"] = c.output;
  j["method"] = method_name(c.method);
  j["clients"] = c.clients;
  j["client_sampling_ratio"] = c.client_sampling_ratio;
  j["rounds"] = c.rounds;
  j["samples_per_client"] = c.samples_per_client;
  j["dirichlet_alpha"] =
      std::isinf(c.dirichlet_alpha) ? detail::Json("iid") : detail::Json(c.dirichlet_alpha);
  j["task"] = {{"out_dim", c.task.out_dim},
               {"in_dim", c.task.in_dim},
               {"planted_rank", c.task.planted_rank},
               {"components", c.task.components},
               {"shift_magnitude", c.task.shift_magnitude},
               {"label_noise", c.task.label_noise}};
  j["adapter"] = {{"rank", c.rank}, {"alpha", c.alpha}};
  j["sketch"] = {{"oversketch", c.oversketch},
                 {"p_sweep", c.p_sweep},
                 {"resample_omega", c.resample_omega}};
  j["local"] = {{"steps", c.local_steps},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size}};
  j["dp"] = {{"enabled", c.dp_enabled},
             {"clip", c.clip},
             {"noise_multiplier", detail::optional_json(c.noise_multiplier)},
             {"target_epsilon", detail::optional_json(c.target_epsilon)},
             {"delta", c.delta},
             {"data_sampling_ratio", c.data_sampling_ratio},
             {"rdp_constant", c.rdp_constant},
             {"sigma_constant", c.sigma_constant}};
  j["runtime"] = {{"workers", c.workers},
                  {"bytes_per_element", c.bytes_per_element},
                  {"dropout_probability", c.dropout_probability},
                  {"max_retries", c.max_retries},
                  {"eval_every", c.eval_every}};
  return j;
}

inline std::string emit_config(const ExperimentConfig& c) {
  return config_to_json(c).dump(2) + "\n";
}

inline ExperimentConfig config_from_json(const nlohmann::ordered_json& j) {
  using detail::read_field;
  detail::reject_unknown(j, "",
                         {"seed", "output", "method", "clients", "client_sampling_ratio",
                          "rounds", "samples_per_client", "dirichlet_alpha", "task",
                          "adapter", "sketch", "local", "dp", "runtime"});
  ExperimentConfig c;
  read_field(j, "seed", "", c.seed);
  read_field(j, "output", "", c.output);
  if (j.contains("method")) {
    std::string m;
    read_field(j, "method", "", m);
    c.method = parse_method(m);
  }
  read_field(j, "clients", "", c.clients);
  read_field(j, "client_sampling_ratio", "", c.client_sampling_ratio);
  read_field(j, "rounds", "", c.rounds);
  read_field(j, "samples_per_client", "", c.samples_per_client);
  if (j.contains("dirichlet_alpha")) {
    const auto& v = j.at("dirichlet_alpha");
    if (v.is_string()) {
      if (v.get<std::string>() != "iid") {
        throw ConfigError("dirichlet_alpha", "expected a number or \"iid\"");
      }
      c.dirichlet_alpha = std::numeric_limits<double>::infinity();
    } else {
      read_field(j, "dirichlet_alpha", "", c.dirichlet_alpha);
    }
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    detail::reject_unknown(t, "task", {"out_dim", "in_dim", "planted_rank", "components",
                                       "shift_magnitude", "label_noise"});
    read_field(t, "out_dim", "task", c.task.out_dim);
    read_field(t, "in_dim", "task", c.task.in_dim);
    read_field(t, "planted_rank", "task", c.task.planted_rank);
    read_field(t, "components", "task", c.task.components);
    read_field(t, "shift_magnitude", "task", c.task.shift_magnitude);
    read_field(t, "label_noise", "task", c.task.label_noise);
  }
  if (j.contains("adapter")) {
    const auto& a = j.at("adapter");
    detail::reject_unknown(a, "adapter", {"rank", "alpha"});
    read_field(a, "rank", "adapter", c.rank);
    read_field(a, "alpha", "adapter", c.alpha);
  }
  if (j.contains("sketch")) {
    const auto& s = j.at("sketch");
    detail::reject_unknown(s, "sketch", {"oversketch", "p_sweep", "resample_omega"});
    read_field(s, "oversketch", "sketch", c.oversketch);
    if (s.contains("p_sweep")) {
      const auto& ps = s.at("p_sweep");
      if (!ps.is_array()) throw ConfigError("sketch.p_sweep", "expected an array");
      c.p_sweep.clear();
      for (const auto& v : ps) {
        if (!v.is_number_unsigned()) {
          throw ConfigError("sketch.p_sweep", "entries must be non-negative integers");
        }
        c.p_sweep.push_back(v.get<std::size_t>());
      }
    }
    read_field(s, "resample_omega", "sketch", c.resample_omega);
  }
  if (j.contains("local")) {
    const auto& l = j.at("local");
    detail::reject_unknown(l, "local", {"steps", "learning_rate", "batch_size"});
    read_field(l, "steps", "local", c.local_steps);
    read_field(l, "learning_rate", "local", c.learning_rate);
    read_field(l, "batch_size", "local", c.batch_size);
  }
  if (j.contains("dp")) {
    const auto& d = j.at("dp");
    detail::reject_unknown(d, "dp", {"enabled", "clip", "noise_multiplier", "target_epsilon",
                                     "delta", "data_sampling_ratio", "rdp_constant",
                                     "sigma_constant"});
    read_field(d, "enabled", "dp", c.dp_enabled);
    read_field(d, "clip", "dp", c.clip);
    detail::read_optional(d, "noise_multiplier", "dp", c.noise_multiplier);
    detail::read_optional(d, "target_epsilon", "dp", c.target_epsilon);
    read_field(d, "delta", "dp", c.delta);
    read_field(d, "data_sampling_ratio", "dp", c.data_sampling_ratio);
    read_field(d, "rdp_constant", "dp", c.rdp_constant);
    read_field(d, "sigma_constant", "dp", c.sigma_constant);
  }
  if (j.contains("runtime")) {
    const auto& r = j.at("runtime");
    detail::reject_unknown(r, "runtime", {"workers", "bytes_per_element",
                                          "dropout_probability", "max_retries", "eval_every"});
    read_field(r, "workers", "runtime", c.workers);
    read_field(r, "bytes_per_element", "runtime", c.bytes_per_element);
    read_field(r, "dropout_probability", "runtime", c.dropout_probability);
    read_field(r, "max_retries", "runtime", c.max_retries);
    read_field(r, "eval_every", "runtime", c.eval_every);
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", e.what());
  }
  return config_from_json(j);
}

// Applies "dotted.path=value" to a JSON document. The value is parsed as JSON
// when possible and taken as a plain string otherwise.
inline void apply_override(nlohmann::ordered_json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::ordered_json value;
  try {
    value = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::ordered_json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError(path, "not an object path");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = nlohmann::ordered_json::object();
  }
  if (!node->is_object()) throw ConfigError(path, "not an object path");
  (*node)[parts.back()] = value;
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("--config", "cannot read " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

inline std::filesystem::path resolve_output(const ExperimentConfig& c) {
  if (!c.output.empty()) return c.output;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return kDefaultOutDir;
}

inline std::size_t expected_cohort(const ExperimentConfig& c) {
  const double e = std::round(c.client_sampling_ratio * static_cast<double>(c.clients));
  return std::max<std::size_t>(1, static_cast<std::size_t>(e));
}

// Noise multiplier actually used: explicit, or calibrated from the target.
inline double effective_sigma(const ExperimentConfig& c) {
  if (!c.dp_enabled) return 0.0;
  if (c.noise_multiplier) return *c.noise_multiplier;
  const double var = calibrate_sigma(*c.target_epsilon, c.delta, c.data_sampling_ratio,
                                     c.local_steps, c.client_sampling_ratio,
                                     std::max<std::size_t>(c.rounds, 1), c.clients,
                                     c.sigma_constant);
  return std::sqrt(var);
}

inline DPConfig local_config(const ExperimentConfig& c) {
  DPConfig d;
  d.clip = c.clip;
  d.noise_multiplier = effective_sigma(c);
  d.data_sampling_ratio = c.data_sampling_ratio;
  d.local_steps = c.local_steps;
  d.learning_rate = c.learning_rate;
  d.batch_size = c.batch_size;
  return d;
}

inline AccountantParams accountant_params(const ExperimentConfig& c) {
  return {effective_sigma(c), c.data_sampling_ratio, c.local_steps, c.client_sampling_ratio,
          std::max<std::size_t>(c.rounds, 1), expected_cohort(c), c.delta, c.rdp_constant};
}

// The `account` command: privacy spend of a configuration without training.
inline nlohmann::ordered_json account(const ExperimentConfig& c) {
  validate(c);
  if (!c.dp_enabled) {
    PrivacySpend none{std::numeric_limits<double>::infinity(), 0.0};
    none.per_round_epsilon = std::numeric_limits<double>::infinity();
    auto j = spend_json(none, 0.0);
    j["epsilon"] = nullptr;
    j["dp_enabled"] = false;
    return j;
  }
  const auto p = accountant_params(c);
  auto j = spend_json(end_to_end_spend(p), p.noise_multiplier);
  j["dp_enabled"] = true;
  j["rounds"] = p.rounds;
  j["clients_per_round"] = p.clients_per_round;
  return j;
}

struct RunOutput {
  std::size_t oversketch = 0;
  std::filesystem::path dir;
  std::vector<RoundReport> reports;
  AdapterPair final_global;
  double sigma = 0.0;
};

struct Setup {
  TaskSpec task;
  Federation fed;
  ServerState server;
};

inline Setup build_setup(const ExperimentConfig& c, std::size_t oversketch) {
  validate(c);
  const RngState master(c.seed);
  RngState task_rng = master.split(Purpose::kTask);
  Setup s;
  s.task = make_task(c.task, task_rng);
  s.fed.w0 = s.task.w0;
  s.fed.datasets = generate_federated_task(s.task, c.clients, c.samples_per_client,
                                           c.dirichlet_alpha, master);
  s.fed.master = master;
  RoundConfig& rc = s.fed.config;
  rc.local = local_config(c);
  rc.use_dp = c.dp_enabled;
  rc.client_sampling_ratio = c.client_sampling_ratio;
  rc.accounting_cohort = expected_cohort(c);
  rc.delta = c.delta;
  rc.rdp_constant = c.rdp_constant;
  rc.max_retries = c.max_retries;
  rc.dropout_probability = c.dropout_probability;
  rc.workers = c.workers;
  RngState init_rng = master.split(Purpose::kInit);
  s.server.global = init_adapter(c.task.out_dim, c.task.in_dim, c.rank, c.alpha, init_rng);
  s.server.omega_seed = master.split(Purpose::kOmega).next_u64();
  s.server.oversketch = oversketch;
  s.server.resample_omega = c.resample_omega;
  s.server.bytes_per_element = c.bytes_per_element;
  for (std::size_t k = 0; k < c.clients; ++k) s.server.registry.push_back(k);
  return s;
}

// Trains without writing anything; loss is evaluated every `eval_every`
// rounds and on the last round (NaN otherwise).
inline RunOutput simulate(const ExperimentConfig& c, std::size_t oversketch) {
  Setup s = build_setup(c, oversketch);
  RunOutput out;
  out.oversketch = oversketch;
  out.sigma = s.fed.config.local.noise_multiplier;
  for (std::size_t t = 1; t <= c.rounds; ++t) {
    RoundResult r = run_round(c.method, s.fed, s.server);
    if (t % c.eval_every == 0 || t == c.rounds) {
      r.report.loss = global_loss(s.fed.w0, delta_w(s.server.global), s.fed.datasets);
    } else {
      r.report.loss = std::numeric_limits<double>::quiet_NaN();
    }
    out.reports.push_back(std::move(r.report));
  }
  out.final_global = s.server.global;
  return out;
}

// Runs the configured method once, or once per p_sweep entry into <out>/p<p>.
inline std::vector<RunOutput> run_experiment(const ExperimentConfig& c) {
  validate(c);
  const std::filesystem::path root = resolve_output(c);
  ensure_dir(root);
  write_text(root / "config.json", emit_config(c));
  std::vector<std::size_t> ps = c.p_sweep;
  const bool sweep = !ps.empty();
  if (!sweep) ps.push_back(c.oversketch);
  std::vector<RunOutput> runs;
  for (std::size_t p : ps) {
    RunOutput run = simulate(c, p);
    run.dir = sweep ? root / ("p" + std::to_string(p)) : root;
    const CommModel comm{c.method, c.task.out_dim, c.rank, p, expected_cohort(c),
                         c.bytes_per_element, c.task.in_dim};
    emit_report(run.reports, comm, run.dir);
    runs.push_back(std::move(run));
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Fidelity grid: one round from a fresh adapter, every client selected,
// FedASK (p = 0) and FedAvg aggregating the same locally trained pairs.

struct GridOptions {
  std::uint64_t seed = 2026;
  std::vector<std::size_t> clients_per_round{2, 5, 10, 15, 20};
  std::vector<double> dirichlet_alphas{0.1, 0.5, 0.8, 1.0,
                                       std::numeric_limits<double>::infinity()};
  TaskShape task{64, 64, 4, 5, 1.0, 0.0};
  std::size_t rank = 4;
  double alpha = 4.0;
  std::size_t samples_per_client = 64;
  std::size_t local_steps = 30;
  double learning_rate = 0.02;
  std::size_t batch_size = 8;
};

struct GridCell {
  std::size_t clients_per_round = 0;
  double dirichlet_alpha = 0.0;
  double fedask_cosine = 0.0;  // pre-truncation
  double fedask_gap = 0.0;
  double fedask_cosine_post = 0.0;
  double fedavg_cosine = 0.0;
  double fedavg_gap = 0.0;
};

inline GridCell fidelity_cell(const GridOptions& o, std::size_t ks, double dir_alpha,
                              std::uint64_t cell_tag) {
  ExperimentConfig c;
  c.seed = o.seed;
  c.clients = ks;
  c.client_sampling_ratio = 1.0;
  c.samples_per_client = o.samples_per_client;
  c.dirichlet_alpha = dir_alpha;
  c.task = o.task;
  c.rank = o.rank;
  c.alpha = o.alpha;
  c.oversketch = 0;
  c.local_steps = o.local_steps;
  c.learning_rate = o.learning_rate;
  c.batch_size = o.batch_size;
  c.rounds = 1;
  // Each cell gets its own master stream.
  c.seed = RngState(o.seed).split(cell_tag).next_u64();
  Setup s = build_setup(c, 0);
  std::vector<std::size_t> all(ks);
  std::iota(all.begin(), all.end(), 0);
  const RoundResult ask = fedask_round_once(s.fed, s.server, all);
  const RoundResult avg = fedavg_round_once(s.fed, s.server, all);
  return {ks, dir_alpha, ask.report.cosine, ask.report.frob_gap, ask.report.cosine_post,
          avg.report.cosine, avg.report.frob_gap};
}

inline std::vector<GridCell> fidelity_grid(const GridOptions& o = {}) {
  std::vector<GridCell> cells;
  std::uint64_t tag = 0;
  for (std::size_t ks : o.clients_per_round) {
    for (double a : o.dirichlet_alphas) cells.push_back(fidelity_cell(o, ks, a, ++tag));
  }
  return cells;
}

inline std::string alpha_label(double a) {
  if (std::isinf(a)) return "iid";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", a);
  return buf;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DegenerateInputError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Writes fidelity_grid.csv and fidelity_grid.json into `dir`.
inline std::vector<GridCell> reproduce_fidelity_grid(const std::filesystem::path& dir,
                                                     const GridOptions& o = {}) {
  const auto cells = fidelity_grid(o);
  std::string csv = "clients_per_round,dirichlet_alpha,method,cosine,frob_gap\n";
  std::vector<double> ask;
  std::vector<double> avg;
  for (const auto& c : cells) {
    const std::string key = std::to_string(c.clients_per_round) + "," + alpha_label(c.dirichlet_alpha);
    csv += key + ",fedask," + format_real(c.fedask_cosine) + "," + format_real(c.fedask_gap) + "\n";
    csv += key + ",fedavg," + format_real(c.fedavg_cosine) + "," + format_real(c.fedavg_gap) + "\n";
    ask.push_back(c.fedask_cosine);
    avg.push_back(c.fedavg_cosine);
  }
  nlohmann::ordered_json j;
  j["cells"] = cells.size();
  j["fedask_min_cosine"] = *std::min_element(ask.begin(), ask.end());
  j["fedavg_min_cosine"] = *std::min_element(avg.begin(), avg.end());
  j["fedavg_median_cosine"] = median(avg);
  j["fedavg_max_cosine"] = *std::max_element(avg.begin(), avg.end());
  ensure_dir(dir);
  write_text(dir / "fidelity_grid.csv", csv);
  write_text(dir / "fidelity_grid.json", j.dump(2) + "\n");
  return cells;
}

// ---------------------------------------------------------------------------
// Noise study: scheme (i) noises both factors, scheme (ii) noises B only.

struct NoiseStudyOptions {
  std::uint64_t seed = 7;
  std::size_t d_l = 16;
  std::size_t rank = 4;
  double eta = 1.0;
  double clip = 1.0;
  double batch = 1.0;
  std::vector<double> sigmas{0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0};
  std::size_t trials = 4000;
  double slope_min_sigma = 8.0;  // regression uses sigma >= this
  // Downstream training on a planted single-client task.
  std::size_t train_steps = 50;
  double train_lr = 0.02;
  std::size_t train_batch = 8;
  std::size_t train_samples = 64;
};

struct NoiseStudyRow {
  double sigma = 0.0;
  NoiseScheme scheme = NoiseScheme::kBothFactors;
  NoisePowerBreakdown predicted;
  double empirical = 0.0;
  double final_loss = 0.0;
};

struct NoiseStudyResult {
  std::vector<NoiseStudyRow> rows;
  double predicted_slope = 0.0;  // d(both / B-only) / d(sigma^2)
  double empirical_slope = 0.0;
  bool identical_at_zero = false;
};

// Clipped SGD on both factors with per-factor Gaussian noise of standard
// deviation sigma * C / batch; scheme kBOnly leaves A noiseless. Batches and
// each factor's noise come from separate streams so the schemes share them.
inline AdapterPair noisy_factor_training(AdapterPair p, const Matrix& w0,
                                         const ClientDataset& data, std::size_t steps,
                                         double lr, std::size_t batch, double clip,
                                         double sigma, NoiseScheme scheme,
                                         const RngState& base) {
  RngState batch_rng = base.split(1);
  RngState noise_a = base.split(2);
  RngState noise_b = base.split(3);
  const double sd = sigma * clip / static_cast<double>(batch);
  for (std::size_t s = 0; s < steps; ++s) {
    const auto idx = uniform_batch(data.size(), batch, batch_rng);
    Matrix g = loss_and_grad_w(w0, p, data, idx).grad_w;
    g *= 1.0 / std::max(1.0, frobenius_norm(g) / clip);
    auto lg = lora_gradients(p, g);
    if (sigma > 0.0) {
      lg.grad_b += gaussian_matrix(p.b.rows(), p.b.cols(), noise_b) * sd;
      if (scheme == NoiseScheme::kBothFactors) {
        lg.grad_a += gaussian_matrix(p.a.rows(), p.a.cols(), noise_a) * sd;
      }
    }
    p.a -= lg.grad_a * lr;
    p.b -= lg.grad_b * lr;
  }
  return p;
}

inline NoiseStudyResult noise_study(const NoiseStudyOptions& o = {}) {
  const RngState master = RngState(o.seed).split(Purpose::kNoiseStudy);
  RngState fac = master.split(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(o.d_l));
  const Matrix a = gaussian_matrix(o.rank, o.d_l, fac) * scale;
  const Matrix b = gaussian_matrix(o.d_l, o.rank, fac) * scale;

  RngState task_rng = master.split(2);
  const TaskSpec task = make_task({o.d_l, o.d_l, o.rank, 1, 0.0, 0.0}, task_rng);
  const auto data = generate_federated_task(task, 1, o.train_samples,
                                            std::numeric_limits<double>::infinity(),
                                            master.split(3));
  RngState init_rng = master.split(4);
  const AdapterPair init =
      init_adapter(o.d_l, o.d_l, o.rank, static_cast<double>(o.rank), init_rng);

  NoiseStudyResult out;
  std::vector<double> xs;
  std::vector<double> ys;
  AdapterPair zero_both;
  AdapterPair zero_b;
  for (std::size_t i = 0; i < o.sigmas.size(); ++i) {
    const double sigma = o.sigmas[i];
    double power[2] = {0.0, 0.0};
    for (NoiseScheme scheme : {NoiseScheme::kBothFactors, NoiseScheme::kBOnly}) {
      const int k = scheme == NoiseScheme::kBothFactors ? 0 : 1;
      NoiseStudyRow row;
      row.sigma = sigma;
      row.scheme = scheme;
      row.predicted = predicted_noise_power(a, b, o.eta, sigma, o.clip, o.batch, o.d_l,
                                            o.rank, scheme);
      RngState mc = master.split(100 + i).split(k);
      row.empirical =
          empirical_noise_power(a, b, o.eta, sigma, o.clip, o.batch, o.trials, mc, scheme);
      power[k] = row.empirical;
      const AdapterPair trained =
          noisy_factor_training(init, task.w0, data[0], o.train_steps, o.train_lr,
                                o.train_batch, o.clip, sigma, scheme, master.split(5));
      row.final_loss = global_loss(task.w0, delta_w(trained), data);
      if (sigma == 0.0) (k == 0 ? zero_both : zero_b) = trained;
      out.rows.push_back(row);
    }
    if (sigma >= o.slope_min_sigma && power[1] > 0.0) {
      xs.push_back(sigma * sigma);
      ys.push_back(power[0] / power[1]);
    }
  }
  out.identical_at_zero = !zero_both.a.empty() && zero_both == zero_b;
  const double na2 = std::pow(frobenius_norm(a), 2);
  out.predicted_slope = o.eta * o.eta * o.clip * o.clip * static_cast<double>(o.d_l) *
                        static_cast<double>(o.rank) / (o.batch * o.batch * na2);
  if (xs.size() >= 2) {
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxy += (xs[i] - mx) * (ys[i] - my);
      sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    out.empirical_slope = sxy / sxx;
  }
  return out;
}

// Writes noise_study.csv and noise_study.json into `dir`.
inline NoiseStudyResult reproduce_noise_study(const std::filesystem::path& dir,
                                              const NoiseStudyOptions& o = {}) {
  const auto r = noise_study(o);
  std::string csv =
      "sigma,scheme,predicted_linear,predicted_quadratic,predicted_total,empirical,final_loss\n";
  for (const auto& row : r.rows) {
    csv += format_real(row.sigma);
    csv += row.scheme == NoiseScheme::kBothFactors ? ",both" : ",b_only";
    for (double v : {row.predicted.linear_term, row.predicted.quadratic_term,
                     row.predicted.total_predicted, row.empirical, row.final_loss}) {
      csv += "," + format_real(v);
    }
    csv += "\n";
  }
  nlohmann::ordered_json j;
  j["predicted_ratio_slope"] = r.predicted_slope;
  j["empirical_ratio_slope"] = r.empirical_slope;
  j["slope_relative_error"] = std::abs(r.empirical_slope - r.predicted_slope) / r.predicted_slope;
  j["identical_at_zero_sigma"] = r.identical_at_zero;
  ensure_dir(dir);
  write_text(dir / "noise_study.csv", csv);
  write_text(dir / "noise_study.json", j.dump(2) + "\n");
  return r;
}

}  // namespace fedask

#endif  // FEDASK_EXPERIMENT_HPP_
