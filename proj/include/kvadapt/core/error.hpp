/*
 * Copyright 2026 The kvadapt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kvadapt {

enum class ErrorKind {
  kInvalidTask,
  kOutOfVocabulary,
  kDimension,
  kInvalidInput,
  kLength,
  kInvalidRank,
  kEmptyBag,
  kDegenerateVector,
  kNoTasks,
  kConflict,
  kCompatibility,
  kInvalidData,
  kTooSmall,
  kSchema,
  kMissingFile,
  kIo,
  kConfig,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidTask: return "invalid-task";
    case ErrorKind::kOutOfVocabulary: return "oov";
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kLength: return "length";
    case ErrorKind::kInvalidRank: return "invalid-rank";
    case ErrorKind::kEmptyBag: return "empty-bag";
    case ErrorKind::kDegenerateVector: return "degenerate-vector";
    case ErrorKind::kNoTasks: return "no-tasks";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kCompatibility: return "compatibility";
    case ErrorKind::kInvalidData: return "invalid-data";
    case ErrorKind::kTooSmall: return "too-small";
    case ErrorKind::kSchema: return "schema";
    case ErrorKind::kMissingFile: return "missing-file";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kConfig: return "config";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace kvadapt
