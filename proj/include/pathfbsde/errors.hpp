#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pathfbsde {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A path functional produced a non-finite value at a bumped input.
class EvaluationError : public Error {
public:
    EvaluationError(const std::string& what, std::vector<double> bump)
        : Error(what), bump_(std::move(bump)) {}

    const std::vector<double>& bump() const noexcept { return bump_; }

private:
    std::vector<double> bump_;
};

class SingularRegression : public Error {
public:
    using Error::Error;
};

/// Forward or backward pass produced a non-finite state.
class Diverged : public Error {
public:
    Diverged(const std::string& what, std::size_t node) : Error(what), node_(node) {}

    std::size_t node() const noexcept { return node_; }

private:
    std::size_t node_;
};

class NoConvergence : public Error {
public:
    NoConvergence(const std::string& what, std::vector<double> history)
        : Error(what), history_(std::move(history)) {}

    const std::vector<double>& history() const noexcept { return history_; }

private:
    std::vector<double> history_;
};

class OracleUnavailable : public Error {
public:
    using Error::Error;
};

class SamplerExhausted : public Error {
public:
    using Error::Error;
};

/// Configuration document rejected; carries the offending field path and,
/// for syntax errors, the line number.
class ConfigError : public Error {
public:
    ConfigError(const std::string& what, std::string field, std::size_t line = 0)
        : Error(what), field_(std::move(field)), line_(line) {}

    const std::string& field() const noexcept { return field_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string field_;
    std::size_t line_;
};

} // namespace pathfbsde
