#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// ConfigError -> 2 (usage), DataError -> 3, ShapeError/ContractError/NumericError -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ContractError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

}  // namespace moelab
