#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>

namespace tsal {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Number of worker threads, capped by the TSAL_THREADS environment variable.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, so the
/// result is identical for any thread count as long as fn writes disjoint
/// outputs.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace tsal
