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

// Per-round reports, aggregation fidelity, communication accounting and the
// CSV/JSON writers.

#ifndef FEDASK_METRICS_HPP_
#define FEDASK_METRICS_HPP_

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedask/error.hpp"
#include "fedask/matrix.hpp"
#include "fedask/privacy.hpp"
#include "json.hpp"

namespace fedask {

enum class Method { kFedAsk, kFedAvg, kFfa, kScaffold, kFlora };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::kFedAsk: return "fedask";
    case Method::kFedAvg: return "fedavg";
    case Method::kFfa: return "ffa";
    case Method::kScaffold: return "scaffold";
    case Method::kFlora: return "flora";
  }
  return "unknown";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::kFedAsk, Method::kFedAvg, Method::kFfa, Method::kScaffold,
                   Method::kFlora}) {
    if (method_name(m) == s) return m;
  }
  throw ConfigError("method", "unknown method '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Fidelity

struct Fidelity {
  double cosine = 0.0;
  double frobenius_gap = 0.0;
};

inline Matrix mean_of(std::span<const Matrix> ms) {
  if (ms.empty()) throw DegenerateInputError("mean of an empty list");
  Matrix acc = ms.front();
  for (std::size_t i = 1; i < ms.size(); ++i) acc += ms[i];
  return acc * (1.0 / static_cast<double>(ms.size()));
}

// Compares the global update with the mean of the local updates.
inline Fidelity aggregation_fidelity(const Matrix& global_delta,
                                     std::span<const Matrix> local_deltas) {
  const Matrix ideal = mean_of(local_deltas);
  if (ideal.rows() != global_delta.rows() || ideal.cols() != global_delta.cols()) {
    throw ShapeError("aggregation_fidelity: " + shape_str(global_delta) + " vs " +
                     shape_str(ideal));
  }
  return {cosine_similarity(global_delta, ideal), frobenius_norm(global_delta - ideal)};
}

// ---------------------------------------------------------------------------
// Communication
//
// Counting rules, in elements per client per round:
//   fedavg    up 2 d r                    down 2 d r
//   ffa       up d r                      down d r      (+ d r once, for A)
//   scaffold  up 4 d r                    down 4 d r    (control variates)
//   flora     up 2 d r                    down 2 K_s d r (stacked factors)
//   fedask    up d (r+p) + n (r+p)        down 2 d r + d (r+p) [Q], + seed
// Bytes are elements times bytes_per_element; the 8-byte seed is not scaled.

struct CommModel {
  Method method = Method::kFedAvg;
  std::size_t d_l = 64;
  std::size_t rank = 4;
  std::size_t oversketch = 0;
  std::size_t clients_per_round = 1;
  double bytes_per_element = 2.0;
  std::size_t in_dim = 0;  // n; 0 means square (n = d_l)

  void validate() const {
    if (d_l < 1 || rank < 1 || clients_per_round < 1) {
      throw DomainError("comm model dimensions must be >= 1");
    }
    if (!(bytes_per_element > 0.0)) throw DomainError("bytes_per_element must be > 0");
  }
};

inline constexpr double kSeedBytes = 8.0;

struct CommVolume {
  double uplink = 0.0;
  double downlink = 0.0;
  double one_time = 0.0;  // FFA's initial A broadcast
  double total() const { return uplink + downlink; }
};

// `charge_q` selects whether FedASK's downlink includes the basis Q.
inline CommVolume comm_volume(const CommModel& m, bool charge_q = true) {
  m.validate();
  const double d = static_cast<double>(m.d_l);
  const double n = static_cast<double>(m.in_dim == 0 ? m.d_l : m.in_dim);
  const double r = static_cast<double>(m.rank);
  const double s = r + static_cast<double>(m.oversketch);
  const double ks = static_cast<double>(m.clients_per_round);
  const double b = m.bytes_per_element;
  switch (m.method) {
    case Method::kFedAvg: return {2 * d * r * b, 2 * d * r * b, 0.0};
    case Method::kFfa: return {d * r * b, d * r * b, d * r * b};
    case Method::kScaffold: return {4 * d * r * b, 4 * d * r * b, 0.0};
    case Method::kFlora: return {2 * d * r * b, 2 * ks * d * r * b, 0.0};
    case Method::kFedAsk: {
      const double down = 2 * d * r * b + (charge_q ? d * s * b : 0.0) + kSeedBytes;
      return {(d * s + n * s) * b, down, 0.0};
    }
  }
  throw DomainError("unknown method");
}

// ---------------------------------------------------------------------------
// Reports

struct RoundReport {
  std::size_t round = 0;
  Method method = Method::kFedAsk;
  double cosine = 0.0;    // pre-truncation for fedask
  double frob_gap = 0.0;
  double cosine_post = std::numeric_limits<double>::quiet_NaN();
  double frob_gap_post = std::numeric_limits<double>::quiet_NaN();
  double loss = 0.0;
  double up_bytes = 0.0;
  double down_bytes = 0.0;
  PrivacySpend spend{std::numeric_limits<double>::infinity(), 0.0};
  double sigma = 0.0;
  std::vector<double> spectrum;
  std::size_t cohort_size = 0;
  std::size_t attempts = 1;
};

inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline constexpr std::string_view kReportHeader =
    "round,method,cosine,frob_gap,loss,up_bytes,down_bytes,epsilon,delta,sigma";

inline std::string report_csv(std::span<const RoundReport> reports) {
  std::string out(kReportHeader);
  out += '\n';
  for (const auto& r : reports) {
    out += std::to_string(r.round);
    out += ',';
    out += method_name(r.method);
    for (double v : {r.cosine, r.frob_gap, r.loss, r.up_bytes, r.down_bytes,
                     r.spend.epsilon, r.spend.delta, r.sigma}) {
      out += ',';
      out += format_real(v);
    }
    out += '\n';
  }
  return out;
}

// nlohmann serialises non-finite doubles as null; that is the intended
// encoding for "no privacy" and "not applicable".
inline nlohmann::ordered_json spend_json(const PrivacySpend& s, double sigma) {
  nlohmann::ordered_json j;
  j["epsilon"] = s.epsilon;
  j["delta"] = s.delta;
  j["alpha_opt"] = s.rdp_order;
  j["sigma"] = sigma;
  j["per_round_epsilon"] = s.per_round_epsilon;
  j["degenerate_order"] = s.degenerate_order;
  j["cohort_division_applied"] = s.cohort_division_applied;
  return j;
}

inline nlohmann::ordered_json comm_json(const CommVolume& v) {
  return {{"uplink", v.uplink}, {"downlink", v.downlink}, {"total", v.total()},
          {"one_time", v.one_time}};
}

inline nlohmann::ordered_json summary_json(std::span<const RoundReport> reports,
                                           const CommModel& comm) {
  nlohmann::ordered_json j;
  j["rounds"] = reports.size();
  j["method"] = method_name(comm.method);
  double up = 0.0;
  double down = 0.0;
  for (const auto& r : reports) {
    up += r.up_bytes;
    down += r.down_bytes;
  }
  if (reports.empty()) {
    j["final"] = nullptr;
  } else {
    const auto& f = reports.back();
    j["final"] = {{"cosine_pre_truncation", f.cosine},
                  {"frob_gap_pre_truncation", f.frob_gap},
                  {"cosine_post_truncation", f.cosine_post},
                  {"frob_gap_post_truncation", f.frob_gap_post},
                  {"loss", f.loss},
                  {"spectrum", f.spectrum}};
    j["privacy"] = spend_json(f.spend, f.sigma);
  }
  j["totals"] = {{"up_bytes", up}, {"down_bytes", down}};
  CommModel ask = comm;
  ask.method = Method::kFedAsk;
  j["comm_per_client_round"] = {
      {"fedask_with_q", comm_json(comm_volume(ask, true))},
      {"fedask_without_q", comm_json(comm_volume(ask, false))},
      {"fedavg", comm_json(comm_volume({Method::kFedAvg, comm.d_l, comm.rank, 0,
                                        comm.clients_per_round, comm.bytes_per_element,
                                        comm.in_dim}))}};
  return j;
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Writes <dir>/report.csv and <dir>/summary.json.
inline void emit_report(std::span<const RoundReport> reports, const CommModel& comm,
                        const std::filesystem::path& dir) {
  ensure_dir(dir);
  write_text(dir / "report.csv", report_csv(reports));
  write_text(dir / "summary.json", summary_json(reports, comm).dump(2) + "\n");
}

}  // namespace fedask

#endif  // FEDASK_METRICS_HPP_
