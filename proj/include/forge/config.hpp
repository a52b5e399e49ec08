#pragma once

// Scalar type selection. The library is normally built with 32-bit storage;
// defining FORGE_CHECK_MODE builds a 64-bit variant used for finite-difference
// gradient verification. The two variants live in different inline namespaces
// so both can be linked into one binary.

#include <stdexcept>
#include <string>

#ifdef FORGE_CHECK_MODE
#define FORGE_NAMESPACE_BEGIN \
  namespace forge {           \
  inline namespace f64 {
#else
#define FORGE_NAMESPACE_BEGIN \
  namespace forge {           \
  inline namespace f32 {
#endif
#define FORGE_NAMESPACE_END \
  }                         \
  }

FORGE_NAMESPACE_BEGIN

#ifdef FORGE_CHECK_MODE
using Real = double;
inline constexpr bool kCheckMode = true;
#else
using Real = float;
inline constexpr bool kCheckMode = false;
#endif

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or graph dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Structurally invalid graph, unsupported topology or pass precondition.
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration (model description, cost spec, experiment).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during execution or training.
class NumericError : public Error {
 public:
  using Error::Error;
};

FORGE_NAMESPACE_END
