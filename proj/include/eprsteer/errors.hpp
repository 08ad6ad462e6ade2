#pragma once

#include <stdexcept>
#include <string>

namespace eprsteer {

// Error taxonomy. Every throw site picks a category so the CLI can map
// failures to distinct exit codes and tests can assert on the kind of
// failure, not just "something threw".
enum class ErrorCategory {
    Config,    // bad run configuration / CLI arguments
    Io,        // file missing, unreadable, unwritable
    Format,    // file exists but contents are malformed
    Input,     // bad argument values passed to library functions
    Domain,    // parameter outside the physical/mathematical domain
    Accuracy,  // numerical contract violated (tail mass, quadrature, improper posterior)
    Fit,       // iterative fit failed to converge
};

const char* error_category_name(ErrorCategory c);

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& msg)
        : std::runtime_error(std::string(error_category_name(cat)) + ": " + msg),
          category_(cat) {}

    ErrorCategory category() const { return category_; }

private:
    ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory cat, const std::string& msg) {
    throw Error(cat, msg);
}

inline void require(bool cond, ErrorCategory cat, const std::string& msg) {
    if (!cond) fail(cat, msg);
}

}  // namespace eprsteer
