#ifndef TWINCAL_ERRORS_HPP
#define TWINCAL_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace twincal {

/// Matrix handed to a Cholesky/eigen routine is not symmetric positive definite.
/// Callers typically respond by raising the regularization term.
class NotSpdError : public std::runtime_error {
public:
    explicit NotSpdError(const std::string& what) : std::runtime_error(what) {}
};

/// Least-squares regressor matrix has numerical rank below its column count.
class RankDeficientError : public std::runtime_error {
public:
    explicit RankDeficientError(const std::string& what) : std::runtime_error(what) {}
};

/// Signal too short for the requested model order.
class TooShortError : public std::runtime_error {
public:
    explicit TooShortError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeMismatchError : public std::runtime_error {
public:
    explicit ShapeMismatchError(const std::string& what) : std::runtime_error(what) {}
};

class EmptyInputError : public std::runtime_error {
public:
    explicit EmptyInputError(const std::string& what) : std::runtime_error(what) {}
};

/// A simulation state became non-finite; `step` is the first offending step.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(const std::string& what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_ = 0;
};

/// A target coordinate is constant, so its inverse-variance weight is undefined.
class DegenerateTargetError : public std::runtime_error {
public:
    explicit DegenerateTargetError(const std::string& what) : std::runtime_error(what) {}
};

/// Training loss became non-finite; `batch_index` identifies the offending batch.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& what, std::size_t batch_index)
        : std::runtime_error(what + " (batch " + std::to_string(batch_index) + ")"),
          batch_index_(batch_index) {}
    std::size_t batch_index() const { return batch_index_; }

private:
    std::size_t batch_index_ = 0;
};

/// Malformed config or data file; message carries the 1-based line number.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& file, int line, const std::string& what)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

private:
    int line_ = 0;
};

} // namespace twincal

#endif
