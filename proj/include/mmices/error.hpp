#pragma once

#include <stdexcept>
#include <string>

namespace mmices {

// Raised for anything a user can fix: bad files, bad flags, violated
// data preconditions. The CLI maps this to exit code 2; everything else
// (logic bugs, allocation failures) exits 1.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mmices
