#pragma once

#include <stdexcept>
#include <string>

namespace czsl {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: duplicate names, out-of-range ids, malformed configs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A pretrain set that leaves some attribute or object without a composition.
class CoverageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Array dimensions that do not agree with each other or with a manifest.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint that is missing, truncated or otherwise unreadable.
class LoadError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  PlacementError(const std::string& what, unsigned long long seed)
      : Error(what + " (seed " + std::to_string(seed) + ")"), seed_(seed) {}
  unsigned long long seed() const { return seed_; }

 private:
  unsigned long long seed_;
};

/// Non-finite loss during training; names the loss term and the step.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& term, long step)
      : Error("non-finite loss term '" + term + "' at step " + std::to_string(step)),
        term_(term),
        step_(step) {}
  const std::string& term() const { return term_; }
  long step() const { return step_; }

 private:
  std::string term_;
  long step_;
};

}  // namespace czsl
