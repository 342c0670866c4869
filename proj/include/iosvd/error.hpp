#ifndef IOSVD_ERROR_HPP
#define IOSVD_ERROR_HPP

#include <stdexcept>
#include <string>

namespace iosvd {

// Violated precondition, numerical failure or broken invariant. CLI exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Unreadable/unwritable file, malformed file or bad configuration. CLI exit code 2.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace iosvd

#endif
