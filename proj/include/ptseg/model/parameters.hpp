#pragma once

#include "ptseg/core/autograd.hpp"
#include "ptseg/core/rng.hpp"

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace ptseg {

/// Ordered registry of named trainable tensors. Registration order is the
/// serialization order.
template <typename Scalar>
class ParameterStore {
 public:
  Var<Scalar> add(const std::string& name, Tensor<Scalar> init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var<Scalar>(std::move(init), true));
    return entries_.back().second;
  }

  const std::vector<std::pair<std::string, Var<Scalar>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Var<Scalar>>>& entries() { return entries_; }

  Var<Scalar> get(const std::string& name) const { return entries_.at(index_.at(name)).second; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Index count() const {
    Index total = 0;
    for (const auto& [_, v] : entries_) total += v.value().size();
    return total;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<Scalar>>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

template <typename Scalar>
Tensor<Scalar> truncated_normal(Shape shape, double stddev, CounterRng& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.truncated_normal(stddev));
  return t;
}

/// He-normal for layers followed by leaky/GELU activations.
template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, CounterRng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<Index>(fan_in, 1)));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.normal() * stddev);
  return t;
}

}  // namespace init

}  // namespace ptseg
