#pragma once

#include <stdexcept>
#include <string>

namespace layercache {

// base for everything this library throws on purpose
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// tensor/layer shape disagreements; message names the layer and both shapes
struct shape_error : error {
  using error::error;
};

// unreadable or malformed files (manifests, datasets, frames)
struct parse_error : error {
  using error::error;
};

// manifest references a weight blob that is missing or truncated
struct missing_blob_error : parse_error {
  using parse_error::parse_error;
};

// graph edges form a cycle; message names a node on the cycle
struct cycle_error : error {
  using error::error;
};

// well-formed input that is unusable for the requested operation
struct data_error : error {
  using error::error;
};

// operation invoked before its prerequisites exist (wrong stage order etc.)
struct precondition_error : error {
  using error::error;
};

// training loss became non-finite; message carries epoch and learning rate
struct divergence_error : error {
  using error::error;
};

}  // namespace layercache
