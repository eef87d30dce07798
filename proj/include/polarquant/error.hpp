#pragma once

#include <stdexcept>
#include <string>

namespace polarquant {

// Malformed or truncated files, bad headers, unknown dtypes.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Operation called on an object that cannot serve it (e.g. attention over an
// empty cache).
class StateError : public std::logic_error {
 public:
  explicit StateError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace polarquant
