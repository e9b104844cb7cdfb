// Copyright (c) 2026 The compose-probe Authors. All rights reserved.
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
#include <utility>
#include <vector>

namespace compose_probe {

enum class ErrorKind {
  Config,
  Precondition,
  Bounds,
  Consistency,
  Format,
  Corruption,
  Io,
  Transport,
  Protocol,
  DegenerateInput,
  Shape,
  Numeric,
  CacheMiss,
  Placement,
  Exhaustion,
  Scorer,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::Precondition: return "precondition error";
    case ErrorKind::Bounds: return "bounds error";
    case ErrorKind::Consistency: return "consistency error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Corruption: return "corruption error";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::Transport: return "transport error";
    case ErrorKind::Protocol: return "protocol error";
    case ErrorKind::DegenerateInput: return "degenerate input";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::CacheMiss: return "cache miss";
    case ErrorKind::Placement: return "placement error";
    case ErrorKind::Exhaustion: return "exhaustion error";
    case ErrorKind::Scorer: return "scorer error";
  }
  return "error";
}

/// Base exception for every failure raised by the library. The kind drives
/// CLI exit codes; transport errors are the only retryable ones.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  bool retryable() const noexcept { return kind_ == ErrorKind::Transport; }

 private:
  ErrorKind kind_;
};

/// Raised when embeddings are looked up in a store and some keys are absent.
class CacheMissError : public Error {
 public:
  explicit CacheMissError(std::vector<std::string> keys)
      : Error(ErrorKind::CacheMiss, join(keys)), keys_(std::move(keys)) {}

  const std::vector<std::string>& keys() const noexcept { return keys_; }

 private:
  static std::string join(const std::vector<std::string>& keys) {
    std::string out = std::to_string(keys.size()) + " missing key(s):";
    for (const auto& k : keys) out += " " + k;
    return out;
  }
  std::vector<std::string> keys_;
};

/// A scorer failed on one retrieval instance.
class ScorerError : public Error {
 public:
  ScorerError(std::string instance_id, const std::string& cause, ErrorKind cause_kind)
      : Error(ErrorKind::Scorer, "instance '" + instance_id + "': " + cause),
        instance_id_(std::move(instance_id)),
        cause_kind_(cause_kind) {}

  const std::string& instance_id() const noexcept { return instance_id_; }
  ErrorKind cause_kind() const noexcept { return cause_kind_; }

 private:
  std::string instance_id_;
  ErrorKind cause_kind_;
};

/// Split builder ran out of usable scenes.
class ExhaustionError : public Error {
 public:
  ExhaustionError(std::size_t requested, std::size_t achievable)
      : Error(ErrorKind::Exhaustion, "requested " + std::to_string(requested) +
                                         " records but only " + std::to_string(achievable) +
                                         " are achievable"),
        achievable_(achievable) {}

  std::size_t achievable() const noexcept { return achievable_; }

 private:
  std::size_t achievable_;
};

}  // namespace compose_probe
