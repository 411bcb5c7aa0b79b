#pragma once

#include <stdexcept>
#include <string>

namespace treeseg {

// Base for every error raised by the library. Callers that only care about
// "something in the pipeline failed" catch this one.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  using Error::Error;
};

class InvalidArgument : public Error {
public:
  using Error::Error;
};

// An earlier pipeline step has not produced its output yet.
class MissingPrerequisite : public Error {
public:
  using Error::Error;
};

}  // namespace treeseg
