#pragma once

#include <stdexcept>
#include <string>

namespace airdist {

// Bad inputs, bad configuration, violated preconditions. CLI exit code 2.
class ValidationError : public std::runtime_error {
   public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Solver breakdowns, non-finite values, singular systems. CLI exit code 3.
class NumericError : public std::runtime_error {
   public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace airdist
