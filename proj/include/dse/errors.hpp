#pragma once

#include <stdexcept>
#include <string>

namespace dse {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    Success = 0,
    ContractViolation = 1,
    Io = 2,
    Configuration = 3,
};

class Error : public std::runtime_error {
public:
    Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

/// Caller broke a documented precondition (shape mismatch, out-of-range argument).
class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& what) : Error(what, ExitCode::ContractViolation) {}
};

/// Input data is well-shaped but unusable (non-finite values, too small for a window).
class InvalidInput : public Error {
public:
    explicit InvalidInput(const std::string& what) : Error(what, ExitCode::ContractViolation) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what, ExitCode::Io) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what, ExitCode::Configuration) {}
};

}  // namespace dse
