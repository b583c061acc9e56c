#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lvae {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied parameters; the message names the violated constraint.
class ParameterError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

/// A caller broke an operation's precondition (e.g. asked for the prior of the top level).
class ContractError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

/// Malformed file; `offset()` is the byte position where parsing failed.
class FormatError : public Error {
public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

/// A metric is undefined for the given input (e.g. Hausdorff of two empty masks).
class MetricError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  ConfigError(const std::string& key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

private:
  std::string key_;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
public:
  using Error::Error;
};

}  // namespace lvae
