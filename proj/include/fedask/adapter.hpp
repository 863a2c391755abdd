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

// LoRA parameterization W = W0 + (alpha / r) B A and the synthetic
// least-squares task the simulator trains it on.

#ifndef FEDASK_ADAPTER_HPP_
#define FEDASK_ADAPTER_HPP_

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedask/error.hpp"
#include "fedask/matrix.hpp"
#include "fedask/rng.hpp"

namespace fedask {

// A LoRA factor pair: a is rank x n, b is m x rank.
struct AdapterPair {
  Matrix a;
  Matrix b;
  std::size_t rank = 0;
  double alpha = 1.0;

  std::size_t out_dim() const { return b.rows(); }
  std::size_t in_dim() const { return a.cols(); }
  double scale() const { return alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank < 1) throw ShapeError("adapter rank must be >= 1");
    if (a.rows() != rank || b.cols() != rank) {
      throw ShapeError("adapter factors " + shape_str(b) + " * " + shape_str(a) +
                       " inconsistent with rank " + std::to_string(rank));
    }
    if (rank > std::min(a.cols(), b.rows())) {
      throw ShapeError("adapter rank exceeds min(m, n)");
    }
    if (!(alpha > 0.0)) throw DomainError("adapter alpha must be > 0");
  }

  friend bool operator==(const AdapterPair&, const AdapterPair&) = default;
};

// Standard LoRA start: Gaussian A with variance 1/n, zero B.
inline AdapterPair init_adapter(std::size_t out_dim, std::size_t in_dim,
                                std::size_t rank, double alpha, RngState& rng) {
  AdapterPair p{gaussian_matrix(rank, in_dim, rng) *
                    (1.0 / std::sqrt(static_cast<double>(in_dim))),
                Matrix(out_dim, rank), rank, alpha};
  p.validate();
  return p;
}

inline Matrix delta_w(const AdapterPair& p) { return matmul(p.b, p.a) * p.scale(); }

struct LoraGradients {
  Matrix grad_a;  // rank x n
  Matrix grad_b;  // m x rank
};

inline LoraGradients lora_gradients(const AdapterPair& p, const Matrix& grad_w) {
  if (grad_w.rows() != p.out_dim() || grad_w.cols() != p.in_dim()) {
    throw ShapeError("lora_gradients: grad_w " + shape_str(grad_w) +
                     " does not match adapter " + std::to_string(p.out_dim()) +
                     "x" + std::to_string(p.in_dim()));
  }
  const double s = p.scale();
  return {matmul(transpose(p.b), grad_w) * s, matmul(grad_w, transpose(p.a)) * s};
}

// One client's local data: sample i is (row i of inputs, row i of targets).
struct ClientDataset {
  std::size_t client_id = 0;
  Matrix inputs;   // samples x n
  Matrix targets;  // samples x m
  // Generation metadata; empty for imported data.
  std::vector<double> mixture;
  std::vector<std::size_t> components;

  std::size_t size() const { return inputs.rows(); }

  void validate() const {
    if (inputs.rows() != targets.rows()) {
      throw ShapeError("dataset inputs/targets length mismatch");
    }
    if (inputs.rows() == 0) throw DegenerateInputError("dataset has no samples");
  }
};

inline std::vector<std::size_t> all_indices(const ClientDataset& d) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad_w;
};

// Mean over the batch of 0.5 * ||W x - y||^2 with W = w0 + delta_w(p), and
// its gradient with respect to W.
inline LossAndGrad loss_and_grad_w(const Matrix& w0, const Matrix& delta,
                                   const ClientDataset& data,
                                   std::span<const std::size_t> batch) {
  if (batch.empty()) throw DegenerateInputError("loss_and_grad_w: empty batch");
  if (w0.rows() != delta.rows() || w0.cols() != delta.cols() ||
      w0.cols() != data.inputs.cols() || w0.rows() != data.targets.cols()) {
    throw ShapeError("loss_and_grad_w: weight " + shape_str(w0) +
                     " incompatible with data");
  }
  const Matrix w = w0 + delta;
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  LossAndGrad out{0.0, Matrix(m, n)};
  std::vector<double> resid(m);
  for (std::size_t idx : batch) {
    auto x = data.inputs.row(idx);
    auto y = data.targets.row(idx);
    for (std::size_t i = 0; i < m; ++i) {
      auto wi = w.row(i);
      double s = -y[i];
      for (std::size_t j = 0; j < n; ++j) s += wi[j] * x[j];
      resid[i] = s;
      out.loss += 0.5 * s * s;
    }
    for (std::size_t i = 0; i < m; ++i) {
      auto gi = out.grad_w.row(i);
      for (std::size_t j = 0; j < n; ++j) gi[j] += resid[i] * x[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  out.grad_w *= inv;
  return out;
}

inline LossAndGrad loss_and_grad_w(const Matrix& w0, const AdapterPair& p,
                                   const ClientDataset& data,
                                   std::span<const std::size_t> batch) {
  return loss_and_grad_w(w0, delta_w(p), data, batch);
}

// Global objective: unweighted mean of per-client mean losses.
inline double global_loss(const Matrix& w0, const Matrix& delta,
                          std::span<const ClientDataset> clients) {
  if (clients.empty()) return 0.0;
  double total = 0.0;
  for (const auto& c : clients) {
    total += loss_and_grad_w(w0, delta, c, all_indices(c)).loss;
  }
  return total / static_cast<double>(clients.size());
}

// Synthetic regression task. Component c's optimum is
//   W0 + planted + shift_magnitude * component_shifts[c].
// All shifts share the planted update's column space, so every client's
// optimal update (and any aggregate of them) stays low-rank.
struct TaskSpec {
  Matrix w0;
  Matrix planted;
  std::vector<Matrix> component_shifts;
  std::size_t planted_rank = 1;
  double shift_magnitude = 1.0;
  double label_noise = 0.0;

  std::size_t out_dim() const { return w0.rows(); }
  std::size_t in_dim() const { return w0.cols(); }
  std::size_t num_components() const { return component_shifts.size(); }

  Matrix component_target(std::size_t c) const {
    return w0 + planted + component_shifts.at(c) * shift_magnitude;
  }
};

struct TaskShape {
  std::size_t out_dim = 64;
  std::size_t in_dim = 64;
  std::size_t planted_rank = 4;
  std::size_t components = 5;
  double shift_magnitude = 1.0;
  double label_noise = 0.0;

  bool operator==(const TaskShape&) const = default;
};

namespace detail {
inline Matrix random_orthonormal(std::size_t rows, std::size_t cols, RngState& rng) {
  return qr(gaussian_matrix(rows, cols, rng)).q;
}
}  // namespace detail

inline TaskSpec make_task(const TaskShape& shape, RngState& rng) {
  if (shape.planted_rank < 1 ||
      shape.planted_rank > std::min(shape.out_dim, shape.in_dim)) {
    throw ShapeError("planted rank must lie in [1, min(m, n)]");
  }
  if (shape.components < 1) throw ShapeError("task needs >= 1 component");
  const std::size_t r = shape.planted_rank;
  TaskSpec t;
  t.w0 = gaussian_matrix(shape.out_dim, shape.in_dim, rng) *
         (1.0 / std::sqrt(static_cast<double>(shape.in_dim)));
  const Matrix u = detail::random_orthonormal(shape.out_dim, r, rng);
  const Matrix v = detail::random_orthonormal(shape.in_dim, r, rng);
  std::vector<double> strengths(r);
  for (std::size_t i = 0; i < r; ++i) {
    strengths[i] = 2.0 * static_cast<double>(r - i) / static_cast<double>(r);
  }
  t.planted = matmul(scale_columns(u, strengths), transpose(v));
  for (std::size_t c = 0; c < shape.components; ++c) {
    const Matrix mix = gaussian_matrix(r, r, rng);
    const Matrix vc = detail::random_orthonormal(shape.in_dim, r, rng);
    t.component_shifts.push_back(matmul(matmul(u, mix), transpose(vc)));
  }
  t.planted_rank = r;
  t.shift_magnitude = shape.shift_magnitude;
  t.label_noise = shape.label_noise;
  return t;
}

// Draws `clients` datasets. Client k's samples come from a mixture over the
// task components with weights ~ Dirichlet(dirichlet_alpha); an infinite
// concentration (or a single client) gives every client the uniform mixture.
inline std::vector<ClientDataset> generate_federated_task(
    const TaskSpec& task, std::size_t clients, std::size_t samples_per_client,
    double dirichlet_alpha, const RngState& rng) {
  if (clients < 1) throw DomainError("need at least one client");
  if (samples_per_client < 1) throw DomainError("need at least one sample per client");
  if (!(dirichlet_alpha > 0.0)) throw DomainError("dirichlet_alpha must be > 0");
  const std::size_t num_c = task.num_components();
  std::vector<Matrix> targets;
  for (std::size_t c = 0; c < num_c; ++c) targets.push_back(task.component_target(c));

  std::vector<ClientDataset> out;
  out.reserve(clients);
  for (std::size_t k = 0; k < clients; ++k) {
    RngState local = rng.split(Purpose::kDataset).split(k);
    ClientDataset d;
    d.client_id = k;
    if (clients == 1 || std::isinf(dirichlet_alpha)) {
      d.mixture.assign(num_c, 1.0 / static_cast<double>(num_c));
    } else {
      d.mixture = local.dirichlet(num_c, dirichlet_alpha);
    }
    d.inputs = Matrix(samples_per_client, task.in_dim());
    d.targets = Matrix(samples_per_client, task.out_dim());
    d.components.resize(samples_per_client);
    for (std::size_t s = 0; s < samples_per_client; ++s) {
      const double u = local.uniform();
      std::size_t comp = 0;
      double acc = d.mixture[0];
      while (comp + 1 < num_c && u >= acc) acc += d.mixture[++comp];
      d.components[s] = comp;
      auto x = d.inputs.row(s);
      for (auto& xi : x) xi = local.normal();
      auto y = d.targets.row(s);
      const Matrix& w = targets[comp];
      for (std::size_t i = 0; i < w.rows(); ++i) {
        auto wi = w.row(i);
        double acc_y = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j) acc_y += wi[j] * x[j];
        y[i] = acc_y + (task.label_noise > 0.0 ? task.label_noise * local.normal() : 0.0);
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

// CSV with header client_id,x0..x{n-1},y0..y{m-1}; one row per sample.
inline void write_datasets_csv(const std::string& path,
                               std::span<const ClientDataset> data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const std::size_t n = data.empty() ? 0 : data.front().inputs.cols();
  const std::size_t m = data.empty() ? 0 : data.front().targets.cols();
  f << "client_id";
  for (std::size_t j = 0; j < n; ++j) f << ",x" << j;
  for (std::size_t j = 0; j < m; ++j) f << ",y" << j;
  f << '\n';
  char buf[32];
  for (const auto& d : data) {
    for (std::size_t s = 0; s < d.size(); ++s) {
      f << d.client_id;
      for (double v : d.inputs.row(s)) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        f << buf;
      }
      for (double v : d.targets.row(s)) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        f << buf;
      }
      f << '\n';
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<ClientDataset> read_datasets_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty dataset file: " + path);
  std::size_t n = 0, m = 0;
  {
    std::stringstream hs(line);
    std::string tok;
    std::getline(hs, tok, ',');
    if (tok != "client_id") throw IoError("bad dataset header in " + path);
    while (std::getline(hs, tok, ',')) {
      if (!tok.empty() && tok[0] == 'x') ++n;
      else if (!tok.empty() && tok[0] == 'y') ++m;
      else throw IoError("bad dataset column '" + tok + "'");
    }
  }
  std::vector<ClientDataset> out;
  std::vector<std::vector<double>> xs, ys;
  auto flush = [&]() {
    if (out.empty() || xs.empty()) return;
    ClientDataset& d = out.back();
    std::vector<double> xflat, yflat;
    for (auto& r : xs) xflat.insert(xflat.end(), r.begin(), r.end());
    for (auto& r : ys) yflat.insert(yflat.end(), r.begin(), r.end());
    d.inputs = Matrix(xs.size(), n, std::move(xflat));
    d.targets = Matrix(ys.size(), m, std::move(yflat));
    xs.clear();
    ys.clear();
  };
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string tok;
    std::getline(ls, tok, ',');
    const std::size_t id = std::stoull(tok);
    if (out.empty() || out.back().client_id != id) {
      flush();
      out.push_back(ClientDataset{});
      out.back().client_id = id;
    }
    std::vector<double> x(n), y(m);
    for (auto& v : x) {
      if (!std::getline(ls, tok, ',')) throw IoError("short row in " + path);
      v = std::stod(tok);
    }
    for (auto& v : y) {
      if (!std::getline(ls, tok, ',')) throw IoError("short row in " + path);
      v = std::stod(tok);
    }
    xs.push_back(std::move(x));
    ys.push_back(std::move(y));
  }
  flush();
  return out;
}

}  // namespace fedask

#endif  // FEDASK_ADAPTER_HPP_
