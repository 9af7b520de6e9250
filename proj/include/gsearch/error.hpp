#pragma once

#include <stdexcept>
#include <string>

namespace gsearch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& primitive, const std::string& detail)
      : Error(primitive + ": shape mismatch: " + detail) {}
};

class UnknownPrimitiveError : public Error {
 public:
  explicit UnknownPrimitiveError(const std::string& name) : Error("unknown primitive '" + name + "'") {}
};

// Malformed or truncated files, bad magic, unsupported versions.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

// Extraction left a surviving layer with no path from the network input.
class DisconnectedError : public Error {
 public:
  DisconnectedError(int layer, const std::string& name)
      : Error("disconnected graph: layer " + std::to_string(layer) + " (" + name +
              ") has surviving outputs but no surviving inputs"),
        layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

class BudgetError : public Error {
 public:
  BudgetError(long long budget, long long closest)
      : Error("FLOPs budget " + std::to_string(budget) + " not reached; closest effective FLOPs " +
              std::to_string(closest)),
        closest_(closest) {}
  long long closest() const { return closest_; }

 private:
  long long closest_;
};

}  // namespace gsearch
