#pragma once

#include <stdexcept>
#include <string>

namespace mlfd {

/// Failure classes. Each maps to a distinct process exit code in the CLI.
enum class ErrorKind {
    Config,        // bad configuration, unknown keys, invalid hyperparameters
    Precondition,  // a required stage output or input is missing
    Numeric,       // NaN/Inf produced, non-stochastic distributions
    Dimension,     // shape mismatch inside an operation
    Format,        // malformed manifest or file header
    Corruption,    // checksum mismatch, truncated payload
    StaleCache,    // cache written by a different teacher
    Query,         // lookup of an unknown level, head, or model
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define MLFD_DEFINE_ERROR(Name, Kind)                                     \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

MLFD_DEFINE_ERROR(ConfigError, Config)
MLFD_DEFINE_ERROR(PreconditionError, Precondition)
MLFD_DEFINE_ERROR(NumericError, Numeric)
MLFD_DEFINE_ERROR(DimensionError, Dimension)
MLFD_DEFINE_ERROR(FormatError, Format)
MLFD_DEFINE_ERROR(CorruptionError, Corruption)
MLFD_DEFINE_ERROR(StaleCacheError, StaleCache)
MLFD_DEFINE_ERROR(QueryError, Query)
MLFD_DEFINE_ERROR(IoError, Io)

#undef MLFD_DEFINE_ERROR

inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config: return 2;
        case ErrorKind::Precondition:
        case ErrorKind::StaleCache:
        case ErrorKind::Query: return 3;
        case ErrorKind::Numeric: return 4;
        case ErrorKind::Dimension: return 5;
        case ErrorKind::Format:
        case ErrorKind::Corruption: return 6;
        case ErrorKind::Io: return 7;
    }
    return 1;
}

}  // namespace mlfd
