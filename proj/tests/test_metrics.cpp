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

#include "fedask/metrics.hpp"

using fedask::CommModel;
using fedask::Matrix;
using fedask::Method;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

CommModel model(Method m, std::size_t d, std::size_t r, std::size_t p = 0, std::size_t ks = 2,
                double bpe = 2.0) {
  return {m, d, r, p, ks, bpe, 0};
}

}  // namespace

TEST(Fidelity, EqualToMean) {
  const std::vector<Matrix> locals{Matrix{{1.0, 2.0}}, Matrix{{3.0, 0.0}}};
  const auto f = fedask::aggregation_fidelity(Matrix{{2.0, 1.0}}, locals);
  EXPECT_NEAR(f.cosine, 1.0, 1e-15);
  EXPECT_EQ(f.frobenius_gap, 0.0);
}

TEST(Fidelity, NegatedMean) {
  const std::vector<Matrix> locals{Matrix{{1.0, 2.0}}, Matrix{{3.0, 0.0}}};
  const auto f = fedask::aggregation_fidelity(Matrix{{-2.0, -1.0}}, locals);
  EXPECT_NEAR(f.cosine, -1.0, 1e-15);
  EXPECT_NEAR(f.frobenius_gap, 2.0 * std::sqrt(5.0), 1e-14);
}

TEST(Fidelity, ShapeMismatchThrows) {
  const std::vector<Matrix> locals{Matrix(2, 2, 1.0)};
  EXPECT_THROW(fedask::aggregation_fidelity(Matrix(2, 3, 1.0), locals), fedask::ShapeError);
}

TEST(Comm, RatiosHoldForAllShapes) {
  for (std::size_t d : {1u, 7u, 64u, 4096u}) {
    for (std::size_t r : {1u, 4u, 16u}) {
      const double avg = fedask::comm_volume(model(Method::kFedAvg, d, r)).total();
      EXPECT_EQ(fedask::comm_volume(model(Method::kFfa, d, r)).total() / avg, 0.5);
      EXPECT_EQ(fedask::comm_volume(model(Method::kScaffold, d, r)).total() / avg, 2.0);
    }
  }
}

TEST(Comm, DocumentedCounts) {
  const double d = 64, r = 4, p = 2, ks = 5;
  const auto flora = fedask::comm_volume(model(Method::kFlora, 64, 4, 0, 5, 1.0));
  EXPECT_EQ(flora.uplink, 2 * d * r);
  EXPECT_EQ(flora.downlink, 2 * ks * d * r);
  const auto ffa = fedask::comm_volume(model(Method::kFfa, 64, 4, 0, 5, 1.0));
  EXPECT_EQ(ffa.one_time, d * r);
  const auto ask = fedask::comm_volume(model(Method::kFedAsk, 64, 4, 2, 5, 1.0));
  EXPECT_EQ(ask.uplink, d * (r + p) + d * (r + p));
  EXPECT_EQ(ask.downlink, 2 * d * r + d * (r + p) + fedask::kSeedBytes);
  const auto ask_no_q = fedask::comm_volume(model(Method::kFedAsk, 64, 4, 2, 5, 1.0), false);
  EXPECT_EQ(ask_no_q.downlink, 2 * d * r + fedask::kSeedBytes);
}

TEST(Comm, FedAskIsOneQuarterAboveFedAvgAtZeroOversketch) {
  const auto m = model(Method::kFedAsk, 4096, 8, 0);
  const double ask = fedask::comm_volume(m).total() - fedask::kSeedBytes;
  const double avg = fedask::comm_volume(model(Method::kFedAvg, 4096, 8)).total();
  EXPECT_DOUBLE_EQ(ask / avg, 1.25);
}

TEST(Comm, Int8HalvesFp16) {
  for (Method m : {Method::kFedAvg, Method::kFfa, Method::kScaffold, Method::kFlora,
                   Method::kFedAsk}) {
    const auto fp16 = fedask::comm_volume(model(m, 128, 8, 2, 4, 2.0));
    const auto int8 = fedask::comm_volume(model(m, 128, 8, 2, 4, 1.0));
    const double seed = m == Method::kFedAsk ? fedask::kSeedBytes : 0.0;
    EXPECT_DOUBLE_EQ(int8.uplink, fp16.uplink / 2.0);
    EXPECT_DOUBLE_EQ(int8.downlink - seed, (fp16.downlink - seed) / 2.0);
  }
}

TEST(Comm, InvalidModelThrows) {
  EXPECT_THROW(fedask::comm_volume(model(Method::kFedAvg, 0, 4)), fedask::DomainError);
}

TEST(Report, EmptyRunIsHeaderOnly) {
  const auto dir = std::filesystem::temp_directory_path() / "fedask_report_empty";
  std::filesystem::remove_all(dir);
  fedask::emit_report({}, model(Method::kFedAsk, 8, 2, 1), dir);
  EXPECT_EQ(slurp(dir / "report.csv"), std::string(fedask::kReportHeader) + "\n");
  EXPECT_NE(slurp(dir / "summary.json").find("\"fedask_without_q\""), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Report, RowsAndInfinityEncoding) {
  std::vector<fedask::RoundReport> reps(3);
  for (std::size_t i = 0; i < 3; ++i) {
    reps[i].round = i + 1;
    reps[i].method = Method::kFedAvg;
    reps[i].cosine = 0.5;
  }
  const std::string csv = fedask::report_csv(reps);
  std::stringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "round,method,cosine,frob_gap,loss,up_bytes,down_bytes,epsilon,delta,sigma");
  for (int i = 1; i <= 3; ++i) {
    ASSERT_TRUE(std::getline(ss, line));
    EXPECT_EQ(line.substr(0, line.find(',')), std::to_string(i));
    EXPECT_NE(line.find(",inf,"), std::string::npos);
  }
  EXPECT_FALSE(std::getline(ss, line));
}

TEST(Report, UnwritablePathThrows) {
  EXPECT_THROW(fedask::emit_report({}, model(Method::kFedAsk, 8, 2, 1),
                                   "/proc/fedask-cannot-write-here"),
               fedask::IoError);
}

TEST(Report, FormatRealRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, 1e-300, 123456789.123456789}) {
    EXPECT_EQ(std::stod(fedask::format_real(x)), x);
  }
  EXPECT_EQ(fedask::format_real(std::numeric_limits<double>::infinity()), "inf");
}
