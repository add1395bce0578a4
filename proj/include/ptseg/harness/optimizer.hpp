#pragma once

#include "ptseg/model/parameters.hpp"

#include <vector>

namespace ptseg {

/// SGD with Nesterov momentum in the PyTorch formulation:
///   v <- mu v + g;  p <- p - lr (g + mu v).
template <typename Scalar>
class SgdNesterov {
 public:
  explicit SgdNesterov(double momentum) : momentum_(momentum) {}

  void step(ParameterStore<Scalar>& store, double lr) {
    auto& entries = store.entries();
    if (velocity_.empty()) {
      velocity_.reserve(entries.size());
      for (const auto& [_, v] : entries) velocity_.push_back(Tensor<Scalar>::zeros_like(v.value()).array());
    }
    const Scalar mu = static_cast<Scalar>(momentum_), eta = static_cast<Scalar>(lr);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i].second;
      const auto& g = p.grad().array();
      velocity_[i] = mu * velocity_[i] + g;
      p.mutable_value().array() -= eta * (g + mu * velocity_[i]);
    }
  }

  double momentum() const { return momentum_; }

 private:
  double momentum_;
  std::vector<typename Tensor<Scalar>::Array> velocity_;
};

}  // namespace ptseg
