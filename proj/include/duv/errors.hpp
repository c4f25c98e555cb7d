#pragma once

#include <stdexcept>
#include <string>

namespace duv {

/// Base class for every error raised by the library. Carries the process exit
/// code the command-line front end reports for it.
class Error : public std::runtime_error {
public:
    Error(const std::string& what, int exit_code) : std::runtime_error{what}, exit_code_{exit_code} {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error{what, 2} {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error{what, 3} {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error{what, 4} {}
};

/// Argument outside the mathematical domain of an operation (v_z <= 0, f <= 0, ...).
class DomainError : public NumericalError {
public:
    explicit DomainError(const std::string& what) : NumericalError{what} {}
};

/// Channel truncation could not reach the requested tolerance.
class TruncationError : public NumericalError {
public:
    TruncationError(const std::string& what, double residual) : NumericalError{what}, residual_{residual} {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

} // namespace duv
