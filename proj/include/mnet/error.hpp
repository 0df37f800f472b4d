#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mnet {

/// Base of every error raised by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class VariantMismatch : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptRecord : public Error {
 public:
  CorruptRecord(std::size_t index, const std::string& what)
      : Error("corrupt record " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class NoObject : public Error {
 public:
  explicit NoObject(std::ptrdiff_t frame = -1)
      : Error(frame < 0 ? std::string("no object visible in frame")
                        : "no object visible in frame " + std::to_string(frame)),
        frame_(frame) {}
  std::ptrdiff_t frame() const noexcept { return frame_; }

 private:
  std::ptrdiff_t frame_;
};

class TooShort : public Error {
 public:
  TooShort(std::size_t kept, std::size_t required)
      : Error("sequence too short: " + std::to_string(kept) + " kept frames, need " +
              std::to_string(required)),
        kept_(kept) {}
  std::size_t kept() const noexcept { return kept_; }

 private:
  std::size_t kept_;
};

class DegenerateSlope : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class NoSequences : public Error {
 public:
  using Error::Error;
};

class MissingCheckpoint : public Error {
 public:
  using Error::Error;
};

class ZeroMass : public Error {
 public:
  using Error::Error;
};

}  // namespace mnet
