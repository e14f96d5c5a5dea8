#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace s4mil {

// Every failure raised by the library derives from Error. category() is a
// short machine-readable tag used by the CLI as its error prefix.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& message) : Error("contract", message) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& message) : Error("numerical", message) {}
};

class ParseError : public Error {
public:
    ParseError(const std::string& message, std::size_t offset)
        : Error("parse", message + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class UndefinedMetric : public Error {
public:
    explicit UndefinedMetric(const std::string& message) : Error("undefined-metric", message) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error("config", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace s4mil
