#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace contin {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or out-of-range interchange document.
class TaskError : public Error {
 public:
  TaskError(std::string message, std::string region = {}, std::ptrdiff_t note_index = -1)
      : Error(std::move(message)), region_(std::move(region)), note_index_(note_index) {}

  const std::string& region() const { return region_; }
  /// Index of the offending note within its region, or -1 when not note-specific.
  std::ptrdiff_t note_index() const { return note_index_; }

 private:
  std::string region_;
  std::ptrdiff_t note_index_;
};

/// Binary parse failure (MIDI or weight container) located at a byte offset.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t offset)
      : Error(message + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Ungrammatical token stream.
class TokenError : public Error {
 public:
  TokenError(const std::string& message, std::size_t index)
      : Error(message + " (token index " + std::to_string(index) + ")"), index_(index) {}

  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// Weight container or model-shape problem.
class WeightError : public Error {
 public:
  using Error::Error;
};

}  // namespace contin
