// Copyright 2026 The Melformer Authors
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

namespace melformer {

/// Base of every error raised by the library. `kind()` is a short stable tag
/// used by the CLI for machine-parsable error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};
struct TooShortError : Error {
  explicit TooShortError(const std::string& m) : Error("too-short", m) {}
};

}  // namespace melformer
