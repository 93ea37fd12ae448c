#pragma once

#include <stdexcept>
#include <string>

namespace docenc {

/// Bad input data: malformed files, schema violations, broken invariants.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numeric failure: non-finite values, contract violations in math kernels.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible or corrupt checkpoint / config combination.
class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace docenc
