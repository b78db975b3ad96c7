#pragma once

#include <stdexcept>
#include <string>

namespace chat {

// Base of every error raised by the library. The CLI maps each subclass to a
// distinct exit code, see tools/chat_cli.cpp.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
  public:
    using Error::Error;
};

class EmptyInputError : public Error {
  public:
    using Error::Error;
};

class VocabularyError : public Error {
  public:
    using Error::Error;
};

class GraphError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

// Precondition of an operation was violated by the caller (e.g. a chunk
// without its trailing zero frame).
class ContractError : public Error {
  public:
    using Error::Error;
};

// Instance too large for exhaustive enumeration.
class SizeError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class DataError : public Error {
  public:
    using Error::Error;
};

class CheckpointError : public Error {
  public:
    using Error::Error;
};

class BadMagicError : public CheckpointError {
  public:
    using CheckpointError::CheckpointError;
};

class UnsupportedVersionError : public CheckpointError {
  public:
    using CheckpointError::CheckpointError;
};

class TruncatedCheckpointError : public CheckpointError {
  public:
    using CheckpointError::CheckpointError;
};

} // namespace chat
