#pragma once

#include <stdexcept>
#include <string>

namespace dfr {

// Mirrors dfr_status in the public C header; values must stay in sync.
enum class ErrorCode : int {
  kInvalidArgument = 1,
  kInputShape = 2,
  kInputValue = 3,
  kIo = 4,
  kConfig = 5,
  kTrainingFailure = 6,
  kUnsupported = 7,
  kEmpty = 8,
  kSampling = 9,
  kStageFailure = 10,
  kUndefined = 11,
  kCapability = 12,
  kInternal = 99,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace dfr
