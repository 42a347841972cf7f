#pragma once

#include <stdexcept>
#include <string>

namespace qstore {

/// Failure category. The CLI maps Validation to exit code 1 and the other
/// two to exit code 2.
enum class ErrorKind {
    Validation,  // inputs are inconsistent or malformed
    Io,          // filesystem failure
    Corrupt,     // stored data fails a structural or checksum check
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what)
{
    if (!cond)
        fail(kind, what);
}

}  // namespace qstore
