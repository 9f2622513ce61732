#pragma once

#include <stdexcept>
#include <string>

namespace icr {

enum class ErrorKind {
    invalid_rank,
    numeric,
    shape,
    domain,
    vocab,
    input,
    config,
    sampling,
    extraction,
    compatibility,
    format,
    dependency,
    io,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::invalid_rank: return "invalid-rank";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::shape: return "shape";
    case ErrorKind::domain: return "domain";
    case ErrorKind::vocab: return "vocab";
    case ErrorKind::input: return "input";
    case ErrorKind::config: return "config";
    case ErrorKind::sampling: return "sampling";
    case ErrorKind::extraction: return "extraction";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::format: return "format";
    case ErrorKind::dependency: return "dependency";
    case ErrorKind::io: return "io";
    }
    return "unknown";
}

/// Every failure raised by the library carries a kind so callers (and the CLI
/// exit path) can branch on it without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, ErrorKind kind, const std::string& what) {
    if (!ok) fail(kind, what);
}

} // namespace icr
