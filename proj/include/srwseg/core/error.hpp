#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace srwseg {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input values or shapes.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Operation called while some mutable statistics are not ready.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (unknown key, malformed value, inconsistent settings).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Synthetic scene generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Dataset loading failure carrying one message per offending item.
class LoadError : public Error {
 public:
  explicit LoadError(std::vector<std::string> items)
      : Error(join(items)), items_(std::move(items)) {}

  const std::vector<std::string>& items() const { return items_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out = "dataset load failed";
    for (const auto& it : items) {
      out += "\n  ";
      out += it;
    }
    return out;
  }

  std::vector<std::string> items_;
};

/// Training produced a non-finite loss; the message holds the diagnostic dump.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace srwseg
