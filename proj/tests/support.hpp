#pragma once

#include "ptseg/core/ops.hpp"
#include "ptseg/core/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace ptseg::test {

inline Tensor<double> random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// sum_i w_i x_i as a graph node; turns any op into a scalar with a
/// non-trivial upstream gradient.
inline Var<double> weighted_sum(const Var<double>& x, const Tensor<double>& w) {
  Tensor<double> out(Shape{1}, (x.value().array() * w.array()).sum());
  return Var<double>::make(std::move(out), {x}, [w](Node<double>& n) {
    if (auto* g = n.parent_grad(0)) *g += n.grad[0] * w.array();
  });
}

/// Max over all inputs of |analytic - central difference| / max(|analytic|, |fd|, 1).
inline double fd_error(const std::function<Var<double>()>& loss, std::vector<Var<double>>& inputs, double h = 1e-6) {
  for (auto& v : inputs) v.zero_grad();
  loss().backward();
  double worst = 0.0;
  for (auto& v : inputs) {
    const Tensor<double> analytic = v.grad();
    for (Index i = 0; i < v.value().size(); ++i) {
      double& x = v.mutable_value()[i];
      const double keep = x;
      x = keep + h;
      const double up = loss().item();
      x = keep - h;
      const double down = loss().item();
      x = keep;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1.0}));
    }
  }
  return worst;
}

}  // namespace ptseg::test
