#include "demf/params.hpp"

#include <algorithm>
#include <cmath>

#include "demf/error.hpp"

namespace demf {

Tensor ParamStore::add(std::string name, Tensor tensor, std::string group) {
  if (find(name) != nullptr) throw Error("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(true);
  params_.push_back({std::move(name), tensor, std::move(group)});
  return tensor;
}

Tensor ParamStore::uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng,
                           std::string group) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> values(numel_of(shape));
  for (Real& v : values) v = static_cast<Real>(rng.uniform(-bound, bound));
  return add(std::move(name), Tensor(std::move(shape), std::move(values)), std::move(group));
}

Tensor ParamStore::zeros(std::string name, Shape shape, std::string group) {
  return add(std::move(name), Tensor::zeros(std::move(shape)), std::move(group));
}

Tensor ParamStore::full(std::string name, Shape shape, Real value, std::string group) {
  return add(std::move(name), Tensor::full(std::move(shape), value), std::move(group));
}

std::vector<Parameter> ParamStore::params_in_groups(const std::vector<std::string>& excluded) const {
  std::vector<Parameter> out;
  for (const Parameter& p : params_) {
    if (std::find(excluded.begin(), excluded.end(), p.group) == excluded.end()) out.push_back(p);
  }
  return out;
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const Parameter& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.numel();
  return n;
}

}  // namespace demf
