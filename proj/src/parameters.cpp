#include "cap/parameters.hpp"

#include <cmath>
#include <stdexcept>

namespace cap {

ParameterSet::ParameterSet(const ParameterSet& other) : names_(other.names_) {
  vars_.reserve(other.vars_.size());
  for (const Var& v : other.vars_) vars_.push_back(v.detached(true));
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

const Var& ParameterSet::add(std::string name, Tensor init) {
  for (const auto& n : names_) {
    if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  names_.push_back(std::move(name));
  vars_.emplace_back(std::move(init), true);
  return vars_.back();
}

const Var& ParameterSet::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return vars_[i];
  }
  throw std::out_of_range("unknown parameter: " + name);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const Var& v : vars_) n += v.value().size();
  return n;
}

bool ParameterSet::all_finite() const {
  for (const Var& v : vars_) {
    if (!v.value().all_finite()) return false;
  }
  return true;
}

void ParameterSet::assign(std::span<const Tensor> values) {
  if (values.size() != vars_.size()) {
    throw std::invalid_argument("parameter count mismatch: expected " + std::to_string(vars_.size()) +
                                ", got " + std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (values[i].shape() != vars_[i].shape()) {
      throw std::invalid_argument("parameter '" + names_[i] + "' shape mismatch: expected " +
                                  shape_str(vars_[i].shape()) + ", got " + shape_str(values[i].shape()));
    }
    vars_[i].mutable_value() = values[i];
  }
}

Tensor fan_in_uniform(const Shape& shape, Rng& rng, double gain) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("Adam: learning rate must be non-negative");
}

void Adam::step(std::span<const Var> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Adam: params/grads size mismatch");
  if (m_.empty()) {
    for (const Var& p : params) {
      m_.push_back(Tensor::zeros_like(p.value()));
      v_.push_back(Tensor::zeros_like(p.value()));
    }
  } else if (m_.size() != params.size()) {
    throw std::invalid_argument("Adam: parameter list changed between steps");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var handle = params[i];
    Tensor& value = handle.mutable_value();
    const Tensor& g = grads[i];
    require_same_shape(value, g, "Adam::step");
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

}  // namespace cap
