#pragma once

#include <stdexcept>
#include <string>

namespace loopstage {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input assets are missing, malformed or violate a type invariant.
class AssetError : public Error {
 public:
  using Error::Error;
};

// A caller asked for something the current model state forbids.
class InvalidRequest : public Error {
 public:
  using Error::Error;
};

}  // namespace loopstage
