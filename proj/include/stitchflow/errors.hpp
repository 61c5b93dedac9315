// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace stitchflow {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated by the caller.
struct PreconditionViolation : Error {
  using Error::Error;
};

struct MalformedCaption : Error {
  using Error::Error;
};
struct SpanOutOfRange : Error {
  using Error::Error;
};
struct NoTrackableObject : Error {
  using Error::Error;
};
struct BucketMismatch : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct CorruptCheckpoint : Error {
  using Error::Error;
};
struct InvalidLayerIndex : Error {
  using Error::Error;
};
struct UnknownClassId : Error {
  using Error::Error;
};
struct UnknownTarget : Error {
  using Error::Error;
};
struct RankTooLarge : Error {
  using Error::Error;
};
struct ConfigMismatch : Error {
  using Error::Error;
};
struct InvalidGuidance : Error {
  using Error::Error;
};
struct EmptyManifest : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ArtifactMissing : Error {
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw PreconditionViolation(message);
  }
}

}  // namespace stitchflow
