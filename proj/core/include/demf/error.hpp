#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace demf {

// Base of every error the library raises. Each subclass corresponds to one
// failure kind of the public contract; callers catch the specific type they
// can recover from and let the rest propagate.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
 public:
  ShapeMismatch(const std::string& op, const std::vector<std::size_t>& a,
                const std::vector<std::size_t>& b);
};

class DegenerateProjection : public Error {
 public:
  explicit DegenerateProjection(double denominator);
  double denominator() const { return denominator_; }

 private:
  double denominator_;
};

class NonScalarLoss : public Error {
 public:
  explicit NonScalarLoss(const std::vector<std::size_t>& shape);
};

class MissingGrad : public Error {
 public:
  explicit MissingGrad(const std::string& param_name);
};

class LevelMismatch : public Error {
 public:
  LevelMismatch(std::size_t expected, std::size_t got);
};

class NonSquareK : public Error {
 public:
  explicit NonSquareK(std::size_t k);
};

class EmptyList : public Error {
 public:
  using Error::Error;
};

class SpecInvalid : public Error {
 public:
  using Error::Error;
};

class ConfigInvalid : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(std::size_t step);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class CheckpointMismatch : public Error {
 public:
  using Error::Error;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace demf
