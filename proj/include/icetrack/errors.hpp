#pragma once

#include <stdexcept>
#include <string>

namespace icetrack {

enum class ErrorKind {
  config,
  io_failure,
  degenerate_projection,
  degenerate_box,
  no_intersection,
  out_of_plane,
  split_overlap,
  missing_file,
  shape_mismatch,
  too_short,
  non_finite_loss,
  non_finite_parameters,
  checkpoint_version_mismatch,
  empty_input,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class TypedError : public Error {
 public:
  explicit TypedError(const std::string& msg) : Error(K, msg) {}
};

using ConfigError = TypedError<ErrorKind::config>;
using IOFailure = TypedError<ErrorKind::io_failure>;
using DegenerateProjection = TypedError<ErrorKind::degenerate_projection>;
using DegenerateBox = TypedError<ErrorKind::degenerate_box>;
using NoIntersection = TypedError<ErrorKind::no_intersection>;
using OutOfPlane = TypedError<ErrorKind::out_of_plane>;
using SplitOverlap = TypedError<ErrorKind::split_overlap>;
using MissingFile = TypedError<ErrorKind::missing_file>;
using ShapeMismatch = TypedError<ErrorKind::shape_mismatch>;
using TooShort = TypedError<ErrorKind::too_short>;
using NonFiniteLoss = TypedError<ErrorKind::non_finite_loss>;
using NonFiniteParameters = TypedError<ErrorKind::non_finite_parameters>;
using CheckpointVersionMismatch = TypedError<ErrorKind::checkpoint_version_mismatch>;
using EmptyInput = TypedError<ErrorKind::empty_input>;

// Process exit codes used by the CLI: 0 success, 1 I/O or runtime,
// 2 usage/config, 3 data integrity.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::too_short:
      return 2;
    case ErrorKind::split_overlap:
    case ErrorKind::missing_file:
    case ErrorKind::shape_mismatch:
    case ErrorKind::checkpoint_version_mismatch:
      return 3;
    default:
      return 1;
  }
}

}  // namespace icetrack
