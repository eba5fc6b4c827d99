#pragma once

#include <stdexcept>
#include <string>

namespace handfit {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unparseable input files (OBJ, JSON sidecar, PFM).
struct FormatError : Error {
    using Error::Error;
};

// A structural invariant of a loaded model does not hold.
struct ValidationError : Error {
    using Error::Error;
};

// Tensor shapes incompatible with the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// An operation precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Geometrically degenerate input (collinear point sets, zero weight rows).
struct DegeneracyError : Error {
    using Error::Error;
};

struct TopologyError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Bad values in data (NaN targets and the like).
struct DataError : Error {
    using Error::Error;
};

// Optimization blew up; message carries the loss breakdown snapshot.
struct TrainingError : Error {
    using Error::Error;
};

}  // namespace handfit
