// Copyright (c) 2026 The ModalityBank Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace mbank {

// Base of every error thrown by the library. code() is a stable
// machine-readable identifier used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape_error", what) {}
};

// NaN/Inf produced by a forward or backward pass.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error("numerical_error", what) {}
};

class GraphError : public Error {
 public:
  explicit GraphError(const std::string& what) : Error("graph_error", what) {}
};

class BankError : public Error {
 public:
  explicit BankError(const std::string& what) : Error("bank_error", what) {}
};

class ModelError : public Error {
 public:
  explicit ModelError(const std::string& what) : Error("model_error", what) {}
};

class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error("protocol_error", what) {}
};

// A peer did not answer within the configured deadline.
class TimeoutError : public Error {
 public:
  explicit TimeoutError(const std::string& what) : Error("timeout", what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data_error", what) {}
};

class MetricError : public Error {
 public:
  explicit MetricError(const std::string& what) : Error("metric_error", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

}  // namespace mbank
