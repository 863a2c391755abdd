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

// Client/server rounds for FedASK (two-phase sketching), FedAvg and FFA-LoRA.
//
// Randomness: local training for client k in round t draws from
// master.split(kLocalTrain).split(t).split(k); the cohort of attempt a from
// master.split(kCohort).split(t).split(a). Server sums run in ascending
// client id, so neither worker count nor message order changes any output.

#ifndef FEDASK_FEDERATION_HPP_
#define FEDASK_FEDERATION_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "fedask/adapter.hpp"
#include "fedask/error.hpp"
#include "fedask/matrix.hpp"
#include "fedask/metrics.hpp"
#include "fedask/privacy.hpp"
#include "fedask/rng.hpp"

namespace fedask {

// FNV-1a over the bit patterns of both factors.
inline std::uint64_t fingerprint(const AdapterPair& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto eat = [&h](const Matrix& m) {
    for (double x : m.values()) {
      auto bits = std::bit_cast<std::uint64_t>(x);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    }
  };
  eat(p.a);
  eat(p.b);
  return h;
}

struct ClientState {
  std::size_t id = 0;
  AdapterPair pair;
  const ClientDataset* data = nullptr;
  std::optional<DPConfig> dp;
  // Set by phase 1; phase 2 refuses to run if the pair changed since.
  std::optional<std::uint64_t> phase1_fingerprint;
};

struct SketchMessage {
  std::size_t client_id = 0;
  int phase = 1;
  Matrix payload;
  double payload_bytes = 0.0;
};

struct ServerState {
  AdapterPair global;
  std::uint64_t omega_seed = 0;
  std::size_t round = 0;
  std::size_t oversketch = 0;
  std::vector<std::size_t> registry;
  bool resample_omega = false;
  double bytes_per_element = 2.0;

  std::size_t sketch_cols() const { return global.rank + oversketch; }
};

// n x (r+p) Gaussian test matrix, regenerated from the seed by every party.
inline Matrix generate_omega(const ServerState& s) {
  RngState rng = RngState(s.omega_seed).split(Purpose::kOmega);
  rng = rng.split(s.resample_omega ? s.round : 0);
  return gaussian_matrix(s.global.in_dim(), s.sketch_cols(), rng);
}

inline SketchMessage sketch_phase1(ClientState& c, const Matrix& omega,
                                   double bytes_per_element = 2.0) {
  c.pair.validate();
  if (omega.rows() != c.pair.in_dim()) {
    throw ShapeError("sketch_phase1: omega " + shape_str(omega) + " vs A " +
                     shape_str(c.pair.a));
  }
  Matrix y = matmul(c.pair.b, matmul(c.pair.a, omega));
  c.phase1_fingerprint = fingerprint(c.pair);
  const double bytes = static_cast<double>(y.size()) * bytes_per_element;
  return {c.id, 1, std::move(y), bytes};
}

inline SketchMessage sketch_phase2(ClientState& c, const Matrix& q,
                                   double bytes_per_element = 2.0) {
  if (!c.phase1_fingerprint) {
    throw ProtocolError("sketch_phase2 before sketch_phase1 for client " +
                        std::to_string(c.id));
  }
  if (*c.phase1_fingerprint != fingerprint(c.pair)) {
    throw ProtocolError("client " + std::to_string(c.id) +
                        " changed its adapter between sketch phases");
  }
  if (q.rows() != c.pair.out_dim()) {
    throw ShapeError("sketch_phase2: Q " + shape_str(q) + " vs B " + shape_str(c.pair.b));
  }
  Matrix yt = matmul(transpose(c.pair.a), matmul(transpose(c.pair.b), q));
  const double bytes = static_cast<double>(yt.size()) * bytes_per_element;
  return {c.id, 2, std::move(yt), bytes};
}

namespace detail {
inline Matrix sum_by_client_id(std::span<const SketchMessage> msgs, int phase) {
  if (msgs.empty()) throw DegenerateInputError("no sketch messages");
  std::vector<const SketchMessage*> order;
  for (const auto& m : msgs) {
    if (m.phase != phase) {
      throw ProtocolError("expected phase " + std::to_string(phase) + " message from client " +
                          std::to_string(m.client_id));
    }
    order.push_back(&m);
  }
  std::stable_sort(order.begin(), order.end(), [](const auto* x, const auto* y) {
    return x->client_id < y->client_id;
  });
  Matrix acc = order.front()->payload;
  for (std::size_t i = 1; i < order.size(); ++i) acc += order[i]->payload;
  return acc;
}
}  // namespace detail

inline Matrix server_basis(std::span<const SketchMessage> phase1) {
  const Matrix y = detail::sum_by_client_id(phase1, 1);
  if (frobenius_norm(y) == 0.0) {
    throw DegenerateInputError("aggregate sketch is identically zero");
  }
  return qr(y).q;
}

struct Reconstruction {
  AdapterPair global;            // rank-r balanced factors
  Matrix pre_truncation;         // Q U S V^T = Q (Ytilde_agg / K_s)^T
  std::vector<double> spectrum;  // singular values of the normalised aggregate
};

// SVD of (sum Ytilde_k / K_s)^T, keep the leading r triplets:
//   B = Q U_r S_r^{1/2},  A = S_r^{1/2} V_r^T.
inline Reconstruction server_reconstruct(std::span<const SketchMessage> phase2,
                                         const Matrix& q, std::size_t rank, double alpha) {
  Matrix yt = detail::sum_by_client_id(phase2, 2);
  if (yt.cols() != q.cols()) {
    throw ShapeError("server_reconstruct: sketch " + shape_str(yt) + " vs Q " + shape_str(q));
  }
  yt *= 1.0 / static_cast<double>(phase2.size());
  const Matrix core = transpose(yt);  // (r+p) x n
  const SvdResult s = svd(core);
  if (rank > s.singular_values.size()) {
    throw ShapeError("server_reconstruct: rank " + std::to_string(rank) +
                     " exceeds sketch width " + std::to_string(s.singular_values.size()));
  }
  std::vector<double> root(rank);
  for (std::size_t i = 0; i < rank; ++i) root[i] = std::sqrt(s.singular_values[i]);
  Reconstruction out;
  out.global.rank = rank;
  out.global.alpha = alpha;
  out.global.b = matmul(q, scale_columns(slice(s.u, 0, s.u.rows(), 0, rank), root));
  out.global.a = scale_rows(slice(s.vt, 0, rank, 0, s.vt.cols()), root);
  out.pre_truncation = matmul(q, core);
  out.spectrum = s.singular_values;
  return out;
}

// Expected Frobenius error of a rank-(k+s) Gaussian range finder against the
// best rank-k approximation.
inline double hmt_error_bound(std::span<const double> singular_values, std::size_t k,
                              std::size_t s_over) {
  if (s_over < 2) throw DomainError("hmt_error_bound: oversampling must be >= 2");
  double tail = 0.0;
  for (std::size_t j = k; j < singular_values.size(); ++j) {
    tail += singular_values[j] * singular_values[j];
  }
  return std::sqrt(1.0 + static_cast<double>(k) / static_cast<double>(s_over - 1)) *
         std::sqrt(tail);
}

// Each client independently with probability q; an empty draw is repeated.
inline std::vector<std::size_t> sample_clients(std::size_t k, double q, RngState& rng) {
  if (k < 1) throw DomainError("sample_clients: need at least one client");
  if (!(q > 0.0 && q <= 1.0)) throw DomainError("client sampling ratio must lie in (0, 1]");
  for (;;) {
    std::vector<std::size_t> cohort;
    for (std::size_t i = 0; i < k; ++i) {
      if (rng.uniform() < q) cohort.push_back(i);
    }
    if (!cohort.empty()) return cohort;
  }
}

// ---------------------------------------------------------------------------
// Rounds

struct RoundConfig {
  DPConfig local;  // steps, learning rate and batch size are used in both modes
  bool use_dp = false;
  double client_sampling_ratio = 1.0;
  std::size_t accounting_cohort = 1;  // K_s seen by the accountant
  double delta = 1e-5;
  double rdp_constant = 1.0;
  std::size_t max_retries = 3;
  double dropout_probability = 0.0;  // per client, during phase 2
  std::size_t workers = 1;
};

struct Federation {
  Matrix w0;
  std::vector<ClientDataset> datasets;
  RngState master;
  RoundConfig config;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots; the first exception by index is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    const std::size_t w = std::min(workers, n);
    for (std::size_t t = 0; t < w; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += w) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

enum class LocalRule {
  kBothFactors,  // plain SGD on A and B
  kBOnly,        // plain SGD on B, A fixed
  kDp,           // DP-SGD on B, A fixed
};

inline RngState local_stream(const RngState& master, std::size_t round, std::size_t client) {
  return master.split(Purpose::kLocalTrain).split(round).split(client);
}

inline std::vector<ClientState> local_phase(const Federation& fed, const AdapterPair& start,
                                            std::size_t round,
                                            std::span<const std::size_t> cohort,
                                            LocalRule rule) {
  std::vector<ClientState> clients(cohort.size());
  const DPConfig& lc = fed.config.local;
  parallel_for(cohort.size(), fed.config.workers, [&](std::size_t i) {
    const std::size_t id = cohort[i];
    const ClientDataset& data = fed.datasets.at(id);
    RngState rng = local_stream(fed.master, round, id);
    ClientState c{id, start, &data, std::nullopt, std::nullopt};
    switch (rule) {
      case LocalRule::kBothFactors:
        c.pair = nondp_local_phase(start, fed.w0, data, lc.local_steps, lc.learning_rate,
                                   lc.batch_size, rng);
        break;
      case LocalRule::kBOnly:
        c.pair = fixed_a_local_phase(start, fed.w0, data, lc.local_steps, lc.learning_rate,
                                     lc.batch_size, rng);
        break;
      case LocalRule::kDp:
        c.dp = lc;
        c.pair = dp_local_phase(start, fed.w0, data, lc, rng).pair;
        break;
    }
    clients[i] = std::move(c);
  });
  return clients;
}

inline std::vector<Matrix> local_deltas(std::span<const ClientState> clients) {
  std::vector<Matrix> out;
  out.reserve(clients.size());
  for (const auto& c : clients) out.push_back(delta_w(c.pair));
  return out;
}

inline bool client_drops(const Federation& fed, std::size_t round, std::size_t attempt,
                         std::size_t client) {
  if (fed.config.dropout_probability <= 0.0) return false;
  RngState r = fed.master.split(Purpose::kDropout).split(round).split(attempt).split(client);
  return r.uniform() < fed.config.dropout_probability;
}

struct RoundResult {
  AdapterPair global;
  RoundReport report;
};

// Spend after `rounds_so_far` rounds at the expected cohort size.
inline void fill_spend(const Federation& fed, std::size_t rounds_so_far, RoundReport& rep) {
  if (!fed.config.use_dp) return;
  rep.sigma = fed.config.local.noise_multiplier;
  rep.spend = end_to_end_spend(fed.config.local, fed.config.client_sampling_ratio,
                               rounds_so_far, fed.config.accounting_cohort,
                               fed.config.delta, fed.config.rdp_constant);
}

// One FedASK round for a fixed cohort. `attempt` only feeds dropout injection.
inline RoundResult fedask_round_once(const Federation& fed, const ServerState& server,
                                     std::span<const std::size_t> cohort,
                                     std::size_t attempt = 0) {
  const std::size_t t = server.round + 1;
  auto clients = local_phase(fed, server.global, t, cohort,
                             fed.config.use_dp ? LocalRule::kDp : LocalRule::kBothFactors);
  ServerState next_state = server;
  next_state.round = t;
  const Matrix omega = generate_omega(next_state);
  const double bpe = server.bytes_per_element;

  std::vector<SketchMessage> phase1;
  for (auto& c : clients) phase1.push_back(sketch_phase1(c, omega, bpe));
  const Matrix q = server_basis(phase1);

  std::vector<SketchMessage> phase2;
  for (auto& c : clients) {
    if (client_drops(fed, t, attempt, c.id)) throw ClientDropout(c.id);
    phase2.push_back(sketch_phase2(c, q, bpe));
  }
  Reconstruction rec = server_reconstruct(phase2, q, server.global.rank, server.global.alpha);

  const auto locals = local_deltas(clients);
  const double s = server.global.scale();
  const Fidelity pre = aggregation_fidelity(rec.pre_truncation * s, locals);
  const Fidelity post = aggregation_fidelity(delta_w(rec.global), locals);

  RoundResult out{std::move(rec.global), {}};
  auto& rep = out.report;
  rep.round = t;
  rep.method = Method::kFedAsk;
  rep.cosine = pre.cosine;
  rep.frob_gap = pre.frobenius_gap;
  rep.cosine_post = post.cosine;
  rep.frob_gap_post = post.frobenius_gap;
  rep.spectrum = std::move(rec.spectrum);
  rep.cohort_size = cohort.size();
  const CommVolume v = comm_volume({Method::kFedAsk, server.global.out_dim(),
                                    server.global.rank, server.oversketch, cohort.size(), bpe,
                                    server.global.in_dim()});
  rep.up_bytes = v.uplink;
  rep.down_bytes = v.downlink;
  fill_spend(fed, t, rep);
  return out;
}

// Singular values of B A via B = Q R: they equal those of the r x n matrix R A.
inline std::vector<double> leading_spectrum(const AdapterPair& p) {
  if (p.b.rows() < p.b.cols()) return svd(matmul(p.b, p.a)).singular_values;
  return svd(matmul(qr(p.b).r, p.a)).singular_values;
}

// FedAvg: A and B averaged separately.
inline RoundResult fedavg_round_once(const Federation& fed, const ServerState& server,
                                     std::span<const std::size_t> cohort) {
  if (fed.config.use_dp) {
    throw ConfigError("method", "fedavg runs without differential privacy only");
  }
  const std::size_t t = server.round + 1;
  auto clients = local_phase(fed, server.global, t, cohort, LocalRule::kBothFactors);
  AdapterPair g = server.global;
  g.a = Matrix(g.a.rows(), g.a.cols());
  g.b = Matrix(g.b.rows(), g.b.cols());
  for (const auto& c : clients) {  // cohort is ascending by id
    g.a += c.pair.a;
    g.b += c.pair.b;
  }
  const double inv = 1.0 / static_cast<double>(clients.size());
  g.a *= inv;
  g.b *= inv;
  const Fidelity f = aggregation_fidelity(delta_w(g), local_deltas(clients));
  RoundResult out{g, {}};
  auto& rep = out.report;
  rep.round = t;
  rep.method = Method::kFedAvg;
  rep.cosine = f.cosine;
  rep.frob_gap = f.frobenius_gap;
  rep.spectrum = leading_spectrum(g);
  rep.cohort_size = cohort.size();
  const CommVolume v = comm_volume({Method::kFedAvg, g.out_dim(), g.rank, 0, cohort.size(),
                                    server.bytes_per_element, g.in_dim()});
  rep.up_bytes = v.uplink;
  rep.down_bytes = v.downlink;
  return out;
}

// FFA-LoRA: A stays at its initial value; B is averaged.
inline RoundResult ffa_round_once(const Federation& fed, const ServerState& server,
                                  std::span<const std::size_t> cohort) {
  const std::size_t t = server.round + 1;
  auto clients = local_phase(fed, server.global, t, cohort,
                             fed.config.use_dp ? LocalRule::kDp : LocalRule::kBOnly);
  AdapterPair g = server.global;
  g.b = Matrix(g.b.rows(), g.b.cols());
  for (const auto& c : clients) g.b += c.pair.b;
  g.b *= 1.0 / static_cast<double>(clients.size());
  const Fidelity f = aggregation_fidelity(delta_w(g), local_deltas(clients));
  RoundResult out{g, {}};
  auto& rep = out.report;
  rep.round = t;
  rep.method = Method::kFfa;
  rep.cosine = f.cosine;
  rep.frob_gap = f.frobenius_gap;
  rep.spectrum = leading_spectrum(g);
  rep.cohort_size = cohort.size();
  const CommVolume v = comm_volume({Method::kFfa, g.out_dim(), g.rank, 0, cohort.size(),
                                    server.bytes_per_element, g.in_dim()});
  rep.up_bytes = v.uplink;
  rep.down_bytes = v.downlink + (t == 1 ? v.one_time : 0.0);
  fill_spend(fed, t, rep);
  return out;
}

inline std::vector<std::size_t> draw_cohort(const Federation& fed, std::size_t round,
                                            std::size_t attempt) {
  RngState rng = fed.master.split(Purpose::kCohort).split(round).split(attempt);
  return sample_clients(fed.datasets.size(), fed.config.client_sampling_ratio, rng);
}

// Samples a cohort and runs one round of `method`. A dropout or an all-zero
// aggregate aborts the attempt and re-samples; after max_retries failed
// retries the last error propagates (DegenerateInputError or ClientDropout).
inline RoundResult run_round(Method method, const Federation& fed, ServerState& server) {
  const std::size_t t = server.round + 1;
  for (std::size_t attempt = 0;; ++attempt) {
    const auto cohort = draw_cohort(fed, t, attempt);
    try {
      RoundResult r;
      switch (method) {
        case Method::kFedAsk: r = fedask_round_once(fed, server, cohort, attempt); break;
        case Method::kFedAvg: r = fedavg_round_once(fed, server, cohort); break;
        case Method::kFfa: r = ffa_round_once(fed, server, cohort); break;
        default:
          throw ConfigError("method", std::string(method_name(method)) +
                                          " exists only in the communication model");
      }
      r.report.attempts = attempt + 1;
      server.global = r.global;
      server.round = t;
      return r;
    } catch (const ClientDropout&) {
      if (attempt >= fed.config.max_retries) throw;
    } catch (const DegenerateInputError&) {
      if (attempt >= fed.config.max_retries) throw;
    }
  }
}

inline RoundResult run_round_fedask(const Federation& fed, ServerState& server) {
  return run_round(Method::kFedAsk, fed, server);
}
inline RoundResult run_round_fedavg(const Federation& fed, ServerState& server) {
  return run_round(Method::kFedAvg, fed, server);
}
inline RoundResult run_round_ffa(const Federation& fed, ServerState& server) {
  return run_round(Method::kFfa, fed, server);
}

}  // namespace fedask

#endif  // FEDASK_FEDERATION_HPP_
