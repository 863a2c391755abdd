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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedask/error.hpp"
#include "fedask/experiment.hpp"
#include "fedask/federation.hpp"
#include "oracles.hpp"

using fedask::AdapterPair;
using fedask::ClientState;
using fedask::Matrix;
using fedask::RngState;
using fedask::SketchMessage;

namespace {

AdapterPair random_pair(std::size_t d, std::size_t rank, RngState& r) {
  return {fedask::gaussian_matrix(rank, d, r), fedask::gaussian_matrix(d, rank, r), rank,
          static_cast<double>(rank)};
}

std::vector<ClientState> random_clients(std::size_t k, std::size_t d, std::size_t rank,
                                        RngState& r) {
  std::vector<ClientState> cs;
  for (std::size_t i = 0; i < k; ++i) cs.push_back({i, random_pair(d, rank, r)});
  return cs;
}

Matrix dense_sum(const std::vector<ClientState>& cs) {
  Matrix s(cs[0].pair.b.rows(), cs[0].pair.a.cols());
  for (const auto& c : cs) s += fedask::matmul(c.pair.b, c.pair.a);
  return s;
}

struct Protocol {
  Matrix q;
  fedask::Reconstruction rec;
};

Protocol run_protocol(std::vector<ClientState>& cs, std::size_t p, RngState& r) {
  const std::size_t rank = cs[0].pair.rank;
  const Matrix omega = fedask::gaussian_matrix(cs[0].pair.a.cols(), rank + p, r);
  std::vector<SketchMessage> m1, m2;
  for (auto& c : cs) m1.push_back(fedask::sketch_phase1(c, omega));
  Protocol out;
  out.q = fedask::server_basis(m1);
  for (auto& c : cs) m2.push_back(fedask::sketch_phase2(c, out.q));
  out.rec = fedask::server_reconstruct(m2, out.q, rank, cs[0].pair.alpha);
  return out;
}

double projector_gap(const Matrix& q1, const Matrix& q2) {
  return fedask::frobenius_norm(fedask::matmul(q1, fedask::transpose(q1)) -
                                fedask::matmul(q2, fedask::transpose(q2)));
}

}  // namespace

TEST(Sketch, Phase1MatchesDenseOracle) {
  RngState r(1);
  ClientState c{0, random_pair(12, 3, r)};
  const Matrix omega = fedask::gaussian_matrix(12, 5, r);
  const auto msg = fedask::sketch_phase1(c, omega);
  const auto ref = oracle::multiply(
      oracle::multiply(oracle::to_dense(c.pair.b), oracle::to_dense(c.pair.a)),
      oracle::to_dense(omega));
  EXPECT_LT(oracle::max_abs_diff(ref, msg.payload), 1e-12);
  EXPECT_EQ(msg.payload.cols(), 5u);
  EXPECT_EQ(msg.phase, 1);
  EXPECT_DOUBLE_EQ(msg.payload_bytes, 12 * 5 * 2.0);
}

TEST(Sketch, Phase1ZeroB) {
  RngState r(2);
  ClientState c{0, random_pair(6, 2, r)};
  c.pair.b = Matrix(6, 2);
  const auto msg = fedask::sketch_phase1(c, fedask::gaussian_matrix(6, 4, r));
  EXPECT_EQ(fedask::frobenius_norm(msg.payload), 0.0);
}

TEST(Sketch, Phase1ShapeMismatch) {
  RngState r(3);
  ClientState c{0, random_pair(6, 2, r)};
  EXPECT_THROW(fedask::sketch_phase1(c, Matrix(5, 4)), fedask::ShapeError);
}

TEST(Sketch, Phase2MatchesDenseOracle) {
  RngState r(4);
  ClientState c{0, random_pair(10, 3, r)};
  (void)fedask::sketch_phase1(c, fedask::gaussian_matrix(10, 4, r));
  const Matrix q = fedask::qr(fedask::gaussian_matrix(10, 4, r)).q;
  const auto msg = fedask::sketch_phase2(c, q);
  const auto ref = oracle::multiply(
      oracle::transpose(oracle::multiply(oracle::to_dense(c.pair.b), oracle::to_dense(c.pair.a))),
      oracle::to_dense(q));
  EXPECT_LT(oracle::max_abs_diff(ref, msg.payload), 1e-12);
  EXPECT_EQ(msg.payload.rows(), 10u);
}

TEST(Sketch, Phase2ZeroQ) {
  RngState r(5);
  ClientState c{0, random_pair(6, 2, r)};
  (void)fedask::sketch_phase1(c, fedask::gaussian_matrix(6, 3, r));
  EXPECT_EQ(fedask::frobenius_norm(fedask::sketch_phase2(c, Matrix(6, 3)).payload), 0.0);
}

TEST(Sketch, Phase2DetectsMutation) {
  RngState r(6);
  ClientState c{0, random_pair(6, 2, r)};
  (void)fedask::sketch_phase1(c, fedask::gaussian_matrix(6, 3, r));
  c.pair.b(0, 0) = std::nextafter(c.pair.b(0, 0), 10.0);  // one ulp
  EXPECT_THROW(fedask::sketch_phase2(c, Matrix(6, 3)), fedask::ProtocolError);
}

TEST(Sketch, Phase2BeforePhase1Rejected) {
  RngState r(7);
  ClientState c{0, random_pair(6, 2, r)};
  EXPECT_THROW(fedask::sketch_phase2(c, Matrix(6, 3)), fedask::ProtocolError);
}

TEST(ServerBasis, OrthonormalAndSpansSingleMessage) {
  RngState r(8);
  const Matrix y = fedask::qr(fedask::gaussian_matrix(9, 4, r)).q;
  const std::vector<SketchMessage> msgs{{0, 1, y, 0.0}};
  const Matrix q = fedask::server_basis(msgs);
  EXPECT_LT(projector_gap(q, y), 1e-10);
}

TEST(ServerBasis, OrthonormalForRandomAggregates) {
  RngState r(9);
  for (int t = 0; t < 20; ++t) {
    std::vector<SketchMessage> msgs;
    for (std::size_t k = 0; k < 4; ++k) msgs.push_back({k, 1, fedask::gaussian_matrix(16, 6, r)});
    const Matrix q = fedask::server_basis(msgs);
    EXPECT_LT(fedask::frobenius_norm(fedask::matmul(fedask::transpose(q), q) -
                                     Matrix::identity(6)),
              1e-10);
  }
}

TEST(ServerBasis, OrderIndependent) {
  RngState r(10);
  std::vector<SketchMessage> msgs;
  for (std::size_t k = 0; k < 5; ++k) msgs.push_back({k, 1, fedask::gaussian_matrix(12, 4, r)});
  const Matrix q1 = fedask::server_basis(msgs);
  std::reverse(msgs.begin(), msgs.end());
  std::swap(msgs[1], msgs[3]);
  const Matrix q2 = fedask::server_basis(msgs);
  EXPECT_LE(projector_gap(q1, q2), 1e-12);
  EXPECT_EQ(q1, q2);  // sums are formed in client-id order
}

TEST(ServerBasis, AllZeroAggregateIsDegenerate) {
  const std::vector<SketchMessage> msgs{{0, 1, Matrix(5, 2)}, {1, 1, Matrix(5, 2)}};
  EXPECT_THROW(fedask::server_basis(msgs), fedask::DegenerateInputError);
}

TEST(Reconstruct, SingleClientExact) {
  RngState r(11);
  auto cs = random_clients(1, 16, 3, r);
  const auto out = run_protocol(cs, 2, r);
  const Matrix truth = fedask::delta_w(cs[0].pair);
  EXPECT_LT(fedask::frobenius_norm(fedask::delta_w(out.rec.global) - truth),
            1e-10 * fedask::frobenius_norm(truth));
}

TEST(Reconstruct, ThreeClientsPreTruncationExact) {
  RngState r(12);
  auto cs = random_clients(3, 32, 4, r);  // d_B = 12, p = 10
  const Matrix truth = dense_sum(cs) * (1.0 / 3.0);
  const auto out = run_protocol(cs, 10, r);
  EXPECT_LT(fedask::frobenius_norm(out.rec.pre_truncation - truth),
            1e-10 * fedask::frobenius_norm(truth));
}

TEST(Reconstruct, LowRankAggregateTruncatesLosslessly) {
  RngState r(13);
  auto cs = random_clients(3, 20, 2, r);
  const Matrix shared_a = cs[0].pair.a;
  for (auto& c : cs) c.pair.a = shared_a;  // aggregate has rank <= 2
  const auto out = run_protocol(cs, 3, r);
  const Matrix truth = dense_sum(cs) * (1.0 / 3.0);
  const Matrix proj = fedask::matmul(fedask::matmul(out.q, fedask::transpose(out.q)), truth);
  EXPECT_LT(fedask::frobenius_norm(fedask::matmul(out.rec.global.b, out.rec.global.a) - proj),
            1e-10 * fedask::frobenius_norm(truth));
}

TEST(Reconstruct, BalancedFactorNorms) {
  RngState r(14);
  auto cs = random_clients(4, 24, 3, r);
  const auto out = run_protocol(cs, 4, r);
  const auto& g = out.rec.global;
  for (std::size_t i = 0; i < g.rank; ++i) {
    double bc = 0.0, ar = 0.0;
    for (std::size_t k = 0; k < g.b.rows(); ++k) bc += g.b(k, i) * g.b(k, i);
    for (double x : g.a.row(i)) ar += x * x;
    const double root = std::sqrt(out.rec.spectrum[i]);
    EXPECT_NEAR(std::sqrt(bc), root, 1e-10 * root);
    EXPECT_NEAR(std::sqrt(ar), root, 1e-10 * root);
  }
}

TEST(Reconstruct, SpectrumMatchesDenseAggregate) {
  RngState r(15);
  auto cs = random_clients(3, 32, 4, r);
  const auto out = run_protocol(cs, 10, r);
  const auto ref = oracle::singular_values(dense_sum(cs) * (1.0 / 3.0));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out.rec.spectrum[i], ref[i], 1e-9 * ref[0]);
}

TEST(Reconstruct, TruncationErrorIsSpectralTail) {
  RngState r(16);
  auto cs = random_clients(3, 32, 4, r);
  const auto out = run_protocol(cs, 10, r);
  double tail = 0.0;
  for (std::size_t i = 4; i < out.rec.spectrum.size(); ++i)
    tail += out.rec.spectrum[i] * out.rec.spectrum[i];
  const Matrix ba = fedask::matmul(out.rec.global.b, out.rec.global.a);
  EXPECT_NEAR(fedask::frobenius_norm(out.rec.pre_truncation - ba), std::sqrt(tail),
              1e-9 * out.rec.spectrum[0]);
}

TEST(Hmt, ZeroTailAndHandExample) {
  const std::vector<double> tail0{3.0, 2.0, 0.0, 0.0};
  EXPECT_EQ(fedask::hmt_error_bound(tail0, 2, 3), 0.0);
  const std::vector<double> s{4.0, 2.0, 1.0, 0.5};
  EXPECT_NEAR(fedask::hmt_error_bound(s, 2, 2), std::sqrt(3.0) * std::sqrt(1.25), 1e-15);
  EXPECT_NEAR(fedask::hmt_error_bound(s, 2, 2), 1.9365, 1e-4);
  EXPECT_GT(fedask::hmt_error_bound(s, 2, 2), fedask::hmt_error_bound(s, 2, 5));
  EXPECT_THROW(fedask::hmt_error_bound(s, 2, 1), fedask::DomainError);
}

TEST(SampleClients, FullRatioAndDeterminism) {
  RngState r(17);
  const auto all = fedask::sample_clients(7, 1.0, r);
  EXPECT_EQ(all.size(), 7u);
  RngState a(18), b(18);
  EXPECT_EQ(fedask::sample_clients(50, 0.3, a), fedask::sample_clients(50, 0.3, b));
}

TEST(SampleClients, MeanCohortSize) {
  RngState r(19);
  double total = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) total += fedask::sample_clients(50, 0.2, r).size();
  EXPECT_NEAR(total / draws, 10.0, 0.2);
}

TEST(SampleClients, NeverEmpty) {
  RngState r(20);
  for (int i = 0; i < 2000; ++i) EXPECT_FALSE(fedask::sample_clients(3, 0.05, r).empty());
}

// ---------------------------------------------------------------------------
// Rounds on a small generated task.

namespace {

fedask::ExperimentConfig small_config() {
  fedask::ExperimentConfig c;
  c.seed = 21;
  c.clients = 6;
  c.client_sampling_ratio = 0.5;
  c.rounds = 4;
  c.samples_per_client = 24;
  c.task = {16, 16, 2, 3, 1.0, 0.0};
  c.rank = 2;
  c.alpha = 2.0;
  c.oversketch = 2;
  c.local_steps = 5;
  return c;
}

}  // namespace

TEST(Rounds, FedAskMatchesDenseAverageNonDp) {
  auto c = small_config();
  c.oversketch = 12;  // r + p = 14 >= d_B for up to 6 clients of rank 2
  auto s = fedask::build_setup(c, c.oversketch);
  const std::vector<std::size_t> cohort{0, 2, 3};
  const auto res = fedask::fedask_round_once(s.fed, s.server, cohort);
  EXPECT_NEAR(res.report.cosine, 1.0, 1e-10);
  EXPECT_LT(res.report.frob_gap, 1e-9);
}

TEST(Rounds, FedAvgOfIdenticalPairsIsExact) {
  // Averaging K copies of one pair returns that pair, so the product matches.
  auto c = small_config();
  auto s = fedask::build_setup(c, 0);
  const std::vector<std::size_t> cohort{3};
  const auto res = fedask::fedavg_round_once(s.fed, s.server, cohort);
  EXPECT_NEAR(res.report.cosine, 1.0, 1e-14);
  EXPECT_LT(res.report.frob_gap, 1e-14);
}

TEST(Rounds, FedAvgHandInstanceDiffersFromMeanProduct) {
  // B1 A1 = [[1,0],[0,0]], B2 A2 = [[0,0],[0,1]]; mean product = I/2 but
  // the product of means is [[1,1],[1,1]]/4.
  const Matrix b1{{1.0}, {0.0}}, a1{{1.0, 0.0}};
  const Matrix b2{{0.0}, {1.0}}, a2{{0.0, 1.0}};
  const Matrix avg = fedask::matmul((b1 + b2) * 0.5, (a1 + a2) * 0.5);
  const std::vector<Matrix> locals{fedask::matmul(b1, a1), fedask::matmul(b2, a2)};
  const auto f = fedask::aggregation_fidelity(avg, locals);
  EXPECT_DOUBLE_EQ(avg(0, 1), 0.25);
  EXPECT_NEAR(f.cosine, 0.5 / std::sqrt(0.25 * 2.0), 1e-15);  // <avg, I/2> / norms
  EXPECT_LT(f.cosine, 1.0);
}

TEST(Rounds, FfaKeepsAFrozenAndAggregatesExactly) {
  auto c = small_config();
  c.method = fedask::Method::kFfa;
  c.dp_enabled = true;
  c.noise_multiplier = 0.3;
  auto s = fedask::build_setup(c, 0);
  const Matrix a0 = s.server.global.a;
  for (int t = 0; t < 4; ++t) {
    const auto res = fedask::run_round_ffa(s.fed, s.server);
    EXPECT_EQ(s.server.global.a, a0);
    EXPECT_NEAR(res.report.cosine, 1.0, 1e-12);
  }
}

TEST(Rounds, DpLocalPhaseLeavesAUntouched) {
  auto c = small_config();
  c.dp_enabled = true;
  c.noise_multiplier = 0.5;
  auto s = fedask::build_setup(c, 2);
  const std::vector<std::size_t> cohort{0, 1, 4};
  const auto clients = fedask::local_phase(s.fed, s.server.global, 1, cohort, fedask::LocalRule::kDp);
  for (const auto& cl : clients) EXPECT_EQ(cl.pair.a, s.server.global.a);
}

TEST(Rounds, WorkerCountDoesNotChangeResults) {
  auto c = small_config();
  c.dp_enabled = true;
  c.noise_multiplier = 0.2;
  auto s1 = fedask::build_setup(c, 2);
  auto s4 = fedask::build_setup(c, 2);
  s4.fed.config.workers = 4;
  for (int t = 0; t < 3; ++t) {
    const auto a = fedask::run_round_fedask(s1.fed, s1.server);
    const auto b = fedask::run_round_fedask(s4.fed, s4.server);
    EXPECT_EQ(a.global, b.global);
    EXPECT_EQ(a.report.cosine, b.report.cosine);
  }
}

TEST(Rounds, DropoutRetriesThenSucceedsOrFails) {
  std::size_t max_attempts = 0;
  std::size_t successes = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto c = small_config();
    c.seed = seed;
    c.dropout_probability = 0.2;
    auto s = fedask::build_setup(c, 2);
    try {
      const auto r = fedask::run_round_fedask(s.fed, s.server);
      max_attempts = std::max(max_attempts, r.report.attempts);
      EXPECT_LE(r.report.attempts, 4u);
      ++successes;
    } catch (const fedask::ClientDropout&) {
      // Acceptable outcome after the retry budget is exhausted.
    }
  }
  EXPECT_GT(successes, 0u);
  EXPECT_GE(max_attempts, 2u);

  auto always = small_config();
  always.dropout_probability = 0.999999;
  auto s2 = fedask::build_setup(always, 2);
  EXPECT_THROW(fedask::run_round_fedask(s2.fed, s2.server), fedask::ClientDropout);
}

TEST(Rounds, OmegaIsFixedUnlessResampled) {
  fedask::ServerState s;
  s.global = fedask::AdapterPair{Matrix(2, 8), Matrix(8, 2), 2, 2.0};
  s.omega_seed = 99;
  s.oversketch = 1;
  s.round = 1;
  const Matrix o1 = fedask::generate_omega(s);
  s.round = 2;
  EXPECT_EQ(fedask::generate_omega(s), o1);
  s.resample_omega = true;
  EXPECT_NE(fedask::generate_omega(s), o1);
}
