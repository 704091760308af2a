#pragma once

#include <stdexcept>
#include <string>

namespace starry {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor / autodiff
struct ShapeMismatchError : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct NoTapeError : Error { using Error::Error; };

// Geometry
struct BehindCameraError : Error { using Error::Error; };
struct InvalidSigmaError : Error { using Error::Error; };

// Composition / model
struct InconsistentViewsError : Error { using Error::Error; };
struct UnknownTaskError : Error { using Error::Error; };

// Environment
struct PlacementFailureError : Error { using Error::Error; };

// Training / IO
struct DatasetMissingError : Error { using Error::Error; };
struct CheckpointCorruptError : Error { using Error::Error; };
struct NonFiniteLossError : Error { using Error::Error; };

}  // namespace starry
