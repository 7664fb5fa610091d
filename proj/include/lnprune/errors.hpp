#pragma once

#include <stdexcept>
#include <string>

namespace lnprune {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer dimension mismatches. Message names the offending dimension.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration: schema violations, bad prune targets, bad hyperparameters.
struct ConfigError : Error {
    using Error::Error;
};

// Dataset/model file problems: bad magic, truncation, count mismatches, bad labels.
struct DataError : Error {
    using Error::Error;
};

// Numerical failure, e.g. training divergence (NaN loss).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace lnprune
