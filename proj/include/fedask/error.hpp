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

#ifndef FEDASK_ERROR_HPP_
#define FEDASK_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace fedask {

// Incompatible matrix or payload dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input is structurally valid but mathematically degenerate (zero norm,
// empty batch, all-zero aggregate).
class DegenerateInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parameter outside the domain of a formula (e.g. RDP order <= 1).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A party broke the round protocol, e.g. mutated its adapter pair between
// the two sketch phases.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A client vanished after contributing to the phase-1 aggregate. The round
// has to be restarted with a fresh cohort.
class ClientDropout : public std::runtime_error {
 public:
  explicit ClientDropout(std::size_t client_id)
      : std::runtime_error("client " + std::to_string(client_id) +
                           " dropped out between sketch phases"),
        client_id_(client_id) {}
  std::size_t client_id() const noexcept { return client_id_; }

 private:
  std::size_t client_id_;
};

// Invalid experiment configuration; `field()` names the offending JSON path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedask

#endif  // FEDASK_ERROR_HPP_
