#pragma once

#include <span>
#include <string>
#include <vector>

#include "cap/autograd.hpp"
#include "cap/random.hpp"

namespace cap {

/// Ordered, named set of trainable leaves. Copies are deep.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  const Var& add(std::string name, Tensor init);
  const Var& get(const std::string& name) const;
  const Var& operator[](std::size_t i) const { return vars_[i]; }

  std::span<const Var> vars() const { return vars_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return vars_.size(); }
  std::size_t scalar_count() const;
  bool all_finite() const;

  /// Overwrite values from `values`, in declaration order. Shapes must match.
  void assign(std::span<const Tensor> values);

 private:
  std::vector<std::string> names_;
  std::vector<Var> vars_;
};

/// He-style uniform initialisation for a conv {out, in, k, k} or linear {out, in} weight.
Tensor fan_in_uniform(const Shape& shape, Rng& rng, double gain = 1.0);

/// Adam with bias correction. State is positional: always step the same list.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

  void step(std::span<const Var> params, std::span<const Tensor> grads);
  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace cap
