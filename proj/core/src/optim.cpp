#include "demf/optim.hpp"

#include <cmath>

#include "demf/error.hpp"

namespace demf {

AdamW::AdamW(std::vector<Parameter> params, AdamWOptions options,
             std::map<std::string, double> group_lr_multipliers)
    : params_(std::move(params)), options_(options), multipliers_(std::move(group_lr_multipliers)) {
  for (const Parameter& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  for (const Parameter& p : params_)
    if (!p.tensor.has_grad()) throw MissingGrad(p.name);

  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(options_.beta1, t);
  const double bc2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = params_[k];
    double lr = options_.lr;
    if (auto it = multipliers_.find(p.group); it != multipliers_.end()) lr *= it->second;
    if (lr == 0.0) continue;

    auto values = p.tensor.data_mut();
    const auto grads = p.tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const double decay = 1.0 - lr * options_.weight_decay;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      double w = static_cast<double>(values[i]) * decay;
      w -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      values[i] = static_cast<Real>(w);
    }
  }
}

void AdamW::zero_grad() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

}  // namespace demf
