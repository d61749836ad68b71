#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "demf/params.hpp"

namespace demf {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Moment buffers live here, one pair per
// parameter, in the order the parameters were handed over.
class AdamW {
 public:
  AdamW(std::vector<Parameter> params, AdamWOptions options,
        std::map<std::string, double> group_lr_multipliers = {});

  // Throws MissingGrad naming the first parameter without a gradient.
  void step();
  void zero_grad();

  std::size_t steps_taken() const { return steps_; }
  const AdamWOptions& options() const { return options_; }
  const std::vector<Parameter>& params() const { return params_; }

 private:
  std::vector<Parameter> params_;
  AdamWOptions options_;
  std::map<std::string, double> multipliers_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

}  // namespace demf
