#pragma once

#include <stdexcept>
#include <string>

namespace heal {

// Base class for every error this library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension disagreement between operands (message names both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Dataset ingestion failed (missing file, unreadable directory).
class IngestError : public Error {
 public:
  using Error::Error;
};

// Malformed content inside an otherwise present file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Unknown or unparsable configuration key/value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace heal
