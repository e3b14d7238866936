#pragma once

#include <stdexcept>
#include <string>

namespace idm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible or invalid tensor shapes, dtypes or model bookkeeping.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A kernel input outside its numeric domain (e.g. a divisor below the floor).
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

// Bad magic, version, truncation or an unreadable/unwritable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training or a non-finite sampler state.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long index) : Error(what), index_(index) {}
  long index() const noexcept { return index_; }

 private:
  long index_;
};

// Inverse reconstruction drifted beyond tolerance during recompute backprop.
class ReconstructionError : public Error {
 public:
  ReconstructionError(const std::string& node, double drift)
      : Error("reconstruction drift " + std::to_string(drift) + " in node '" + node + "'"),
        node_(node),
        drift_(drift) {}
  const std::string& node() const noexcept { return node_; }
  double drift() const noexcept { return drift_; }

 private:
  std::string node_;
  double drift_;
};

}  // namespace idm
