#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace finitekin {

// Bad user input. Carries every problem found, each prefixed by its field path.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> problems);
    explicit ConfigError(const std::string& problem) : ConfigError(std::vector<std::string>{problem}) {}
    const std::vector<std::string>& problems() const { return problems_; }

private:
    std::vector<std::string> problems_;
};

// Non-convergence, overlap, underflow, degenerate start and similar.
class NumericalFault : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A theorem-level bound was violated beyond the statistical allowance.
class InvariantViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace finitekin
