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

// Local update rules (plain and DP-SGD on B with A frozen), the LoRA noise
// amplification oracle, and the Renyi-DP accountant chain.

#ifndef FEDASK_PRIVACY_HPP_
#define FEDASK_PRIVACY_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "fedask/adapter.hpp"
#include "fedask/error.hpp"
#include "fedask/matrix.hpp"
#include "fedask/rng.hpp"

namespace fedask {

struct DPConfig {
  double clip = 1.0;                  // C
  double noise_multiplier = 1.0;      // sigma
  double data_sampling_ratio = 0.125;  // q_D, Poisson inclusion probability
  std::size_t local_steps = 10;       // m
  double learning_rate = 0.02;        // gamma
  std::size_t batch_size = 8;

  void validate() const {
    if (!(clip > 0.0)) throw DomainError("dp.clip must be > 0");
    if (!(noise_multiplier >= 0.0)) throw DomainError("dp.noise_multiplier must be >= 0");
    if (!(data_sampling_ratio > 0.0 && data_sampling_ratio <= 1.0)) {
      throw DomainError("dp.data_sampling_ratio must lie in (0, 1]");
    }
    if (local_steps < 1) throw DomainError("dp.local_steps must be >= 1");
    if (!(learning_rate > 0.0)) throw DomainError("dp.learning_rate must be > 0");
    if (batch_size < 1) throw DomainError("dp.batch_size must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Batch sampling

// Each sample independently with probability q.
inline std::vector<std::size_t> poisson_batch(std::size_t n, double q, RngState& rng) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() < q) idx.push_back(i);
  }
  return idx;
}

// min(size, n) distinct indices, partial Fisher-Yates.
inline std::vector<std::size_t> uniform_batch(std::size_t n, std::size_t size,
                                              RngState& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  const std::size_t take = std::min(size, n);
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(perm[i], perm[i + rng.below(n - i)]);
  }
  perm.resize(take);
  return perm;
}

// ---------------------------------------------------------------------------
// Local steps

inline AdapterPair nondp_local_step(const AdapterPair& p, const Matrix& w0,
                                    const ClientDataset& data,
                                    std::span<const std::size_t> batch,
                                    double learning_rate) {
  if (learning_rate == 0.0) return p;
  const auto lg = loss_and_grad_w(w0, p, data, batch);
  const auto g = lora_gradients(p, lg.grad_w);
  AdapterPair next = p;
  next.a -= g.grad_a * learning_rate;
  next.b -= g.grad_b * learning_rate;
  return next;
}

inline AdapterPair nondp_local_phase(AdapterPair p, const Matrix& w0,
                                     const ClientDataset& data, std::size_t steps,
                                     double learning_rate, std::size_t batch_size,
                                     RngState& rng) {
  for (std::size_t s = 0; s < steps; ++s) {
    const auto batch = uniform_batch(data.size(), batch_size, rng);
    p = nondp_local_step(p, w0, data, batch, learning_rate);
  }
  return p;
}

// SGD on B only; A is left untouched. The non-private FFA-LoRA local rule.
inline AdapterPair fixed_a_local_phase(AdapterPair p, const Matrix& w0,
                                       const ClientDataset& data, std::size_t steps,
                                       double learning_rate, std::size_t batch_size,
                                       RngState& rng) {
  for (std::size_t s = 0; s < steps; ++s) {
    const auto batch = uniform_batch(data.size(), batch_size, rng);
    const auto lg = loss_and_grad_w(w0, p, data, batch);
    p.b -= matmul(lg.grad_w, transpose(p.a)) * (p.scale() * learning_rate);
  }
  return p;
}

struct DpStepResult {
  AdapterPair pair;
  double raw_grad_norm = 0.0;      // ||dl/dW||_F before clipping
  double applied_grad_norm = 0.0;  // after clipping; <= C
};

// One DP-SGD step on B with A frozen:
//   B <- B - (gamma alpha / r) (G / max(1, ||G||_F / C) + N(0, sigma^2 C^2)) A^T
// Noise is drawn per entry of the m x n W-gradient. An empty batch (possible
// under Poisson sampling) contributes a zero signal gradient.
inline DpStepResult dp_local_step(const AdapterPair& p, const Matrix& w0,
                                  const ClientDataset& data,
                                  std::span<const std::size_t> batch,
                                  const DPConfig& cfg, RngState& rng) {
  cfg.validate();
  const std::size_t m = p.out_dim();
  const std::size_t n = p.in_dim();
  if (w0.rows() != m || w0.cols() != n) {
    throw ShapeError("dp_local_step: w0 " + shape_str(w0) + " does not match adapter");
  }
  Matrix g = batch.empty() ? Matrix(m, n) : loss_and_grad_w(w0, p, data, batch).grad_w;
  DpStepResult out{p, frobenius_norm(g), 0.0};
  const double factor = std::max(1.0, out.raw_grad_norm / cfg.clip);
  g *= 1.0 / factor;
  out.applied_grad_norm = frobenius_norm(g);
  // Rescaling can land a few ulps above C; shrink until the bound holds.
  while (out.applied_grad_norm > cfg.clip) {
    g *= 1.0 - 4.0 * std::numeric_limits<double>::epsilon();
    out.applied_grad_norm = frobenius_norm(g);
  }
  if (cfg.noise_multiplier > 0.0) {
    const double sd = cfg.noise_multiplier * cfg.clip;
    for (auto& x : g.values()) x += sd * rng.normal();
  }
  out.pair.b -= matmul(g, transpose(p.a)) * (cfg.learning_rate * p.scale());
  return out;
}

struct DpPhaseResult {
  AdapterPair pair;
  std::vector<double> applied_grad_norms;
};

// m DP steps with Poisson(q_D) batches. A is never written.
inline DpPhaseResult dp_local_phase(const AdapterPair& start, const Matrix& w0,
                                    const ClientDataset& data, const DPConfig& cfg,
                                    RngState& rng) {
  DpPhaseResult out{start, {}};
  out.applied_grad_norms.reserve(cfg.local_steps);
  for (std::size_t s = 0; s < cfg.local_steps; ++s) {
    const auto batch = poisson_batch(data.size(), cfg.data_sampling_ratio, rng);
    auto step = dp_local_step(out.pair, w0, data, batch, cfg, rng);
    out.pair = std::move(step.pair);
    out.applied_grad_norms.push_back(step.applied_grad_norm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise amplification oracle
//
// A_{t+1} = A - eta (gradA + xiA), B_{t+1} = B - eta (gradB + xiB) with i.i.d.
// N(0, s^2) entries, s^2 = sigma^2 C^2 / B_size^2. The noise part of
// B_{t+1} A_{t+1} - B A is X + Y with
//   X = -eta (B xiA + xiB A),  Y = eta^2 (gradB xiA + xiB gradA + xiB xiA).

enum class NoiseScheme {
  kBothFactors,  // xiA and xiB both present
  kBOnly,        // xiA = 0
};

struct NoiseGradients {
  Matrix grad_a;  // r x d
  Matrix grad_b;  // d x r
};

struct NoisePowerBreakdown {
  double linear_term = 0.0;     // E||X||^2 = eta^2 s^2 d_l (||A||^2 + ||B||^2)
  double quadratic_term = 0.0;  // E||eta^2 xiB xiA||^2 = eta^4 s^4 d_l^2 r
  double total_predicted = 0.0;  // linear + quadratic
  double cross_term = 0.0;      // 2 E<X, Y>; zero without gradients
  // Linear term with an extra factor r, the form usually quoted for this bound;
  // reported for comparison, not used in the total.
  double linear_term_as_stated = 0.0;
  std::optional<double> total_empirical;
};

inline NoisePowerBreakdown predicted_noise_power(
    const Matrix& a, const Matrix& b, double eta, double sigma, double clip,
    double batch_size, std::size_t d_l, std::size_t rank,
    NoiseScheme scheme = NoiseScheme::kBothFactors,
    const NoiseGradients* grads = nullptr) {
  if (!(sigma >= 0.0)) throw DomainError("sigma must be >= 0");
  if (!(batch_size > 0.0)) throw DomainError("batch size must be > 0");
  const double s2 = sigma * sigma * clip * clip / (batch_size * batch_size);
  const double dl = static_cast<double>(d_l);
  const double r = static_cast<double>(rank);
  const double na2 = std::pow(frobenius_norm(a), 2);
  const double nb2 = std::pow(frobenius_norm(b), 2);
  NoisePowerBreakdown out;
  if (scheme == NoiseScheme::kBothFactors) {
    out.linear_term = eta * eta * s2 * dl * (na2 + nb2);
    out.quadratic_term = std::pow(eta, 4) * s2 * s2 * dl * dl * r;
    out.linear_term_as_stated = out.linear_term * r;
    if (grads) {
      out.cross_term = -2.0 * std::pow(eta, 3) * dl * s2 *
                       (frobenius_inner(b, grads->grad_b) +
                        frobenius_inner(a, grads->grad_a));
    }
  } else {
    out.linear_term = eta * eta * s2 * dl * na2;
    out.linear_term_as_stated = out.linear_term * r;
    if (grads) {
      out.cross_term = -2.0 * std::pow(eta, 3) * dl * s2 * frobenius_inner(a, grads->grad_a);
    }
  }
  out.total_predicted = out.linear_term + out.quadratic_term;
  return out;
}

// Monte-Carlo mean of ||X + Y||_F^2 over `trials` independent noise draws.
inline double empirical_noise_power(const Matrix& a, const Matrix& b, double eta,
                                    double sigma, double clip, double batch_size,
                                    std::size_t trials, RngState& rng,
                                    NoiseScheme scheme = NoiseScheme::kBothFactors,
                                    const NoiseGradients* grads = nullptr) {
  if (trials < 1) throw DomainError("trials must be >= 1");
  if (sigma == 0.0) return 0.0;
  const std::size_t r = a.rows();
  const std::size_t d_in = a.cols();
  const std::size_t d_out = b.rows();
  if (b.cols() != r) throw ShapeError("noise oracle: B " + shape_str(b) + ", A " + shape_str(a));
  const double s = sigma * clip / batch_size;
  const bool noise_a = scheme == NoiseScheme::kBothFactors;
  double acc = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Matrix xi_a = noise_a ? gaussian_matrix(r, d_in, rng) * s : Matrix(r, d_in);
    Matrix xi_b = gaussian_matrix(d_out, r, rng) * s;
    Matrix total = (matmul(b, xi_a) + matmul(xi_b, a)) * (-eta);
    Matrix quad = matmul(xi_b, xi_a);
    if (grads) {
      quad += matmul(grads->grad_b, xi_a);
      quad += matmul(xi_b, grads->grad_a);
    }
    total += quad * (eta * eta);
    const double f = frobenius_norm(total);
    acc += f * f;
  }
  return acc / static_cast<double>(trials);
}

// ---------------------------------------------------------------------------
// Accountant

// R'(alpha) = c q^2 (alpha + 1) / sigma^2 for the q-subsampled Gaussian.
// sigma == 0 means no privacy at all: +infinity.
inline double rdp_subsampled_gaussian(double q, double sigma, double order,
                                      double constant = 1.0) {
  if (!(order > 1.0)) throw DomainError("RDP order must be > 1");
  if (!(q > 0.0 && q <= 1.0)) throw DomainError("sampling ratio must lie in (0, 1]");
  if (!(sigma >= 0.0)) throw DomainError("sigma must be >= 0");
  if (sigma == 0.0) return std::numeric_limits<double>::infinity();
  return constant * q * q * (order + 1.0) / (sigma * sigma);
}

inline double compose_rdp(double per_step, std::size_t steps) {
  return static_cast<double>(steps) * per_step;
}

// (alpha, R)-RDP -> (eps, delta)-DP; negative values are clamped to 0.
inline double rdp_to_dp(double rdp, double order, double delta) {
  if (!(order > 1.0)) throw DomainError("RDP order must be > 1");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  const double eps = rdp + std::log((order - 1.0) / order) -
                     (std::log(delta) + std::log(order)) / (order - 1.0);
  return std::max(0.0, eps);
}

struct DpGuarantee {
  double epsilon = 0.0;
  double delta = 0.0;
};

inline DpGuarantee advanced_composition(double epsilon, double delta, std::size_t k,
                                        double delta_slack) {
  if (!(epsilon >= 0.0)) throw DomainError("epsilon must be >= 0");
  if (k < 1) throw DomainError("composition count must be >= 1");
  if (!(delta_slack > 0.0 && delta_slack < 1.0)) {
    throw DomainError("delta' must lie in (0, 1)");
  }
  const double kd = static_cast<double>(k);
  return {std::sqrt(2.0 * kd * std::log(1.0 / delta_slack)) * epsilon +
              kd * epsilon * std::expm1(epsilon),
          kd * delta + delta_slack};
}

inline DpGuarantee subsample_amplify(double epsilon, double delta, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw DomainError("sampling ratio must lie in [0, 1]");
  return {std::log1p(ratio * std::expm1(epsilon)), ratio * delta};
}

struct RdpOrder {
  double alpha = 0.0;
  bool degenerate = false;  // closed form fell to <= 1 and was floored
};

inline constexpr double kMinRdpOrder = 1.0 + 1e-6;

inline RdpOrder optimal_rdp_order(double client_ratio, std::size_t rounds, double delta,
                                  std::size_t clients_per_round, double sigma,
                                  std::size_t local_steps, double data_ratio) {
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  if (!(client_ratio > 0.0) || rounds < 1 || clients_per_round < 1 || local_steps < 1 ||
      !(data_ratio > 0.0) || !(sigma >= 0.0)) {
    throw DomainError("optimal_rdp_order: parameters must be positive");
  }
  const double arg = std::log(2.0 * client_ratio * static_cast<double>(rounds) / delta) *
                     static_cast<double>(clients_per_round) * sigma * sigma /
                     (static_cast<double>(local_steps) * data_ratio * data_ratio);
  const double alpha = arg > 0.0 ? std::sqrt(arg) : 0.0;
  if (!(alpha > kMinRdpOrder)) return {kMinRdpOrder, true};
  return {alpha, false};
}

// Noise variance sigma^2 for a target (epsilon, delta); `constant` is the
// otherwise hidden big-O factor.
inline double calibrate_sigma(double epsilon, double delta, double data_ratio,
                              std::size_t local_steps, double client_ratio,
                              std::size_t rounds, std::size_t clients,
                              double constant = 1.0) {
  if (!(epsilon > 0.0)) throw DomainError("target epsilon must be > 0");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  if (!(data_ratio > 0.0) || local_steps < 1 || !(client_ratio > 0.0) || rounds < 1 ||
      clients < 1) {
    throw DomainError("calibrate_sigma: parameters must be positive");
  }
  const double t = static_cast<double>(rounds);
  return constant * data_ratio * data_ratio * static_cast<double>(local_steps) *
         client_ratio * t * std::log(2.0 / delta) *
         std::log(2.0 * t * client_ratio / delta) /
         (epsilon * epsilon * static_cast<double>(clients));
}

// Everything the accountant is allowed to see. Sketch contents are not part
// of it: the released sketches are post-processing of the noised B factors.
struct AccountantParams {
  double noise_multiplier = 1.0;
  double data_sampling_ratio = 0.125;
  std::size_t local_steps = 10;
  double client_sampling_ratio = 0.2;
  std::size_t rounds = 1;
  std::size_t clients_per_round = 1;
  double delta = 1e-5;
  double rdp_constant = 1.0;
};

struct PrivacySpend {
  double epsilon = 0.0;
  double delta = 0.0;
  double rdp_order = kMinRdpOrder;
  std::size_t rounds_composed = 0;
  double per_round_epsilon = 0.0;  // after client-subsampling amplification
  bool degenerate_order = false;
  // The aggregate RDP is divided by the cohort size before conversion.
  bool cohort_division_applied = true;
};

// Subsampled-Gaussian RDP -> m-step composition -> cohort division ->
// (eps0, delta/2)-DP at the closed-form order -> client-subsampling
// amplification -> advanced composition over T rounds with
// delta1 = delta / (2 q_K T).
inline PrivacySpend end_to_end_spend(const AccountantParams& p) {
  if (!(p.delta > 0.0 && p.delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  const RdpOrder order = optimal_rdp_order(p.client_sampling_ratio, p.rounds, p.delta,
                                           p.clients_per_round, p.noise_multiplier,
                                           p.local_steps, p.data_sampling_ratio);
  const double per_step = rdp_subsampled_gaussian(
      p.data_sampling_ratio, p.noise_multiplier, order.alpha, p.rdp_constant);
  const double per_client = compose_rdp(per_step, p.local_steps);
  const double aggregate = per_client / static_cast<double>(p.clients_per_round);
  const double delta0 = p.delta / 2.0;
  const double eps0 = rdp_to_dp(aggregate, order.alpha, delta0);
  const DpGuarantee per_round = subsample_amplify(eps0, delta0, p.client_sampling_ratio);
  const double delta1 =
      p.delta / (2.0 * p.client_sampling_ratio * static_cast<double>(p.rounds));
  PrivacySpend out;
  out.rdp_order = order.alpha;
  out.degenerate_order = order.degenerate;
  out.rounds_composed = p.rounds;
  out.per_round_epsilon = per_round.epsilon;
  if (std::isinf(per_round.epsilon)) {
    out.epsilon = per_round.epsilon;
    out.delta = static_cast<double>(p.rounds) * per_round.delta + delta1;
    return out;
  }
  const DpGuarantee total =
      advanced_composition(per_round.epsilon, per_round.delta, p.rounds,
                           std::min(delta1, 1.0 - 1e-12));
  out.epsilon = total.epsilon;
  out.delta = total.delta;
  return out;
}

inline PrivacySpend end_to_end_spend(const DPConfig& cfg, double client_ratio,
                                     std::size_t rounds, std::size_t clients_per_round,
                                     double delta, double rdp_constant = 1.0) {
  return end_to_end_spend(AccountantParams{cfg.noise_multiplier, cfg.data_sampling_ratio,
                                           cfg.local_steps, client_ratio, rounds,
                                           clients_per_round, delta, rdp_constant});
}

}  // namespace fedask

#endif  // FEDASK_PRIVACY_HPP_
