#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "demf/rng.hpp"
#include "demf/tensor.hpp"

namespace demf {

// A named learnable tensor. `group` selects the per-group learning-rate
// multiplier and freeze handling in the trainer.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::string group;
};

// Ordered registry of a model's parameters. Names are unique; registration
// order is the checkpoint order.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor tensor, std::string group);

  // Weight ~ uniform(+-1/sqrt(fan_in)).
  Tensor uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng, std::string group);
  Tensor zeros(std::string name, Shape shape, std::string group);
  Tensor full(std::string name, Shape shape, Real value, std::string group);

  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter> params_in_groups(const std::vector<std::string>& excluded) const;
  const Parameter* find(const std::string& name) const;

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<Parameter> params_;
};

}  // namespace demf
