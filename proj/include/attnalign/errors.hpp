#pragma once

#include <stdexcept>
#include <string>

namespace attnalign {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: ConfigError -> 1, data-shaped errors (Parse/Io/Dimension/Domain/
// Index) -> 2, NumericError -> 3.
struct AttnAlignError : std::runtime_error {
    explicit AttnAlignError(const std::string& what) : std::runtime_error(what) {}
};

struct DimensionError : AttnAlignError {
    explicit DimensionError(const std::string& what) : AttnAlignError(what) {}
};

struct DomainError : AttnAlignError {
    explicit DomainError(const std::string& what) : AttnAlignError(what) {}
};

struct IndexError : AttnAlignError {
    explicit IndexError(const std::string& what) : AttnAlignError(what) {}
};

struct ParseError : AttnAlignError {
    explicit ParseError(const std::string& what) : AttnAlignError(what) {}
};

struct ConfigError : AttnAlignError {
    explicit ConfigError(const std::string& what) : AttnAlignError(what) {}
};

struct IoError : AttnAlignError {
    explicit IoError(const std::string& what) : AttnAlignError(what) {}
};

struct NumericError : AttnAlignError {
    explicit NumericError(const std::string& what) : AttnAlignError(what) {}
};

} // namespace attnalign
