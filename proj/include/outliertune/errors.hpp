#pragma once

#include <stdexcept>
#include <string>

namespace otune {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or channel counts do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside the domain of an operation (NaN input, max < min, empty data).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation contract (wrong scheme for a kernel, bad config).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Checked integer accumulation left the int32 range.
class OverflowError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace otune
