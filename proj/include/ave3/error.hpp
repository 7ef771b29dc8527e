#pragma once

#include <stdexcept>
#include <string>

namespace ave3 {

// Every failure the library raises carries one of these codes so callers
// (and tests) can dispatch on the condition instead of parsing messages.
enum class Errc {
  ShapeMismatch,
  NotScalarLoss,
  EmptyTape,
  NonDeterministicFunction,
  NotDivisible,
  InputTooShort,
  InvalidConfig,
  BadFrameShape,
  SessionPoisoned,
  TimestampRegression,
  AlreadyFinished,
  LengthMismatch,
  ZeroReference,
  PositionOutOfRoom,
  SilentSource,
  UnsupportedFormat,
  UnsupportedSampleRate,
  CorruptHeader,
  BadMagic,
  UnsupportedVersion,
  UnknownTensor,
  MissingTensor,
  UnexpectedEof,
  IoError,
  NonFiniteLoss,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace ave3
