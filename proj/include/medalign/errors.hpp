#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medalign {

// Dimension or length mismatch between vectors, matrices or candidate lists.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Attempt to differentiate or update a frozen policy.
class ImmutabilityError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class EmptyResultError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SynthesisUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::size_t epoch, std::size_t batch)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// An input file is absent; `stage` names the step that writes it.
class MissingArtifactError : public std::runtime_error {
 public:
  MissingArtifactError(const std::string& stage, const std::string& path)
      : std::runtime_error("missing artifact " + path + " (produced by stage '" + stage + "')"),
        stage_(stage),
        path_(path) {}

  const std::string& stage() const noexcept { return stage_; }
  const std::string& path() const noexcept { return path_; }

 private:
  std::string stage_;
  std::string path_;
};

}  // namespace medalign
