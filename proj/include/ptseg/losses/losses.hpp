#pragma once

#include "ptseg/core/ops.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ptseg {

/// Epsilon-regularised intensity-weighted centroid, in voxel units.
struct ActivationCenter {
  std::array<double, 3> coords{};
  double mass = 0.0;  ///< sum(I) + N * epsilon
};

/// Mean of {0, .., n-1}; also the limit of the centroid as I -> 0.
inline double grid_midpoint(Index n) { return 0.5 * static_cast<double>(n - 1); }

/// Centroid of a C-order (D, H, W) array.
///
/// Written as midpoint + sum((u - mid) I) / (sum I + N eps), which equals
/// sum(u (I + eps)) / sum(I + eps) because (u - mid) sums to zero; this form
/// returns the midpoint exactly for I = 0.
template <typename Scalar>
ActivationCenter activation_center(const Scalar* I, const Triple& shape, double epsilon) {
  const Index n = prod(shape);
  const double mid[3] = {grid_midpoint(shape[0]), grid_midpoint(shape[1]), grid_midpoint(shape[2])};
  double m0 = 0.0, m[3] = {0.0, 0.0, 0.0};
  Index i = 0;
  for (Index d = 0; d < shape[0]; ++d)
    for (Index h = 0; h < shape[1]; ++h)
      for (Index w = 0; w < shape[2]; ++w, ++i) {
        const double x = static_cast<double>(I[i]);
        m0 += x;
        m[0] += (d - mid[0]) * x;
        m[1] += (h - mid[1]) * x;
        m[2] += (w - mid[2]) * x;
      }
  ActivationCenter c;
  c.mass = m0 + static_cast<double>(n) * epsilon;
  for (int a = 0; a < 3; ++a) c.coords[a] = mid[a] + m[a] / c.mass;
  return c;
}

struct AmaTerms {
  double value = 0.0;
  std::array<double, 3> dcenter{};  ///< dL / d(predicted centre)
};

/// Per-axis powered centre gap scaled by the voxel spacing, summed.
inline AmaTerms ama_terms(const ActivationCenter& p, const ActivationCenter& g, const Spacing& spacing, double beta) {
  AmaTerms t;
  for (int a = 0; a < 3; ++a) {
    const double delta = g.coords[a] - p.coords[a];
    const double mag = std::abs(delta);
    t.value += std::pow(mag, beta) * spacing[a];
    // derivative of |delta|^beta is taken as 0 at delta = 0
    t.dcenter[a] = mag > 0.0 ? -spacing[a] * beta * std::pow(mag, beta - 1.0) * (delta > 0 ? 1.0 : -1.0) : 0.0;
  }
  return t;
}

/// Value and analytic gradient of the anatomy-aware loss for one volume.
template <typename Scalar>
double anatomy_aware_loss(const Scalar* P, const Scalar* G, const Triple& shape, const Spacing& spacing, double beta,
                          double epsilon, Scalar* grad = nullptr, double grad_scale = 1.0) {
  const auto cp = activation_center(P, shape, epsilon);
  const auto cg = activation_center(G, shape, epsilon);
  const auto t = ama_terms(cp, cg, spacing, beta);
  if (grad) {
    // d p_a / d P_i = (u_{a,i} - p_a) / mass
    const double k[3] = {grad_scale * t.dcenter[0] / cp.mass, grad_scale * t.dcenter[1] / cp.mass,
                         grad_scale * t.dcenter[2] / cp.mass};
    Index i = 0;
    for (Index d = 0; d < shape[0]; ++d)
      for (Index h = 0; h < shape[1]; ++h)
        for (Index w = 0; w < shape[2]; ++w, ++i)
          grad[i] += static_cast<Scalar>(k[0] * (d - cp.coords[0]) + k[1] * (h - cp.coords[1]) + k[2] * (w - cp.coords[2]));
  }
  return t.value;
}

enum class LossVariant { dice_ce, dice_ama, dice, ce };

LossVariant parse_loss_variant(const std::string& s);
std::string to_string(LossVariant v);

/// Distance penalty factor, stability constant, compound weight and the
/// running means of the current epoch.
struct LossState {
  double beta = 1.5;
  double epsilon = 1e-8;
  double lambda = 1.0;
  double distance_sum = 0.0;
  double dice_sum = 0.0;
  long steps = 0;

  static constexpr double kLambdaFloor = 1e-8;

  void validate() const {
    if (!(beta > 0)) throw std::invalid_argument("LossState: beta must be > 0");
    if (!(epsilon > 0)) throw std::invalid_argument("LossState: epsilon must be > 0");
    if (!(lambda > 0)) throw std::invalid_argument("LossState: lambda must be > 0");
  }
  void accumulate(double distance, double dice) {
    distance_sum += distance;
    dice_sum += dice;
    ++steps;
  }
  double epoch_distance_mean() const { return steps ? distance_sum / static_cast<double>(steps) : 0.0; }
  double epoch_dice_mean() const { return steps ? dice_sum / static_cast<double>(steps) : 0.0; }
};

/// lambda <- distance mean / max(dice mean, floor); running means reset.
/// A state with no accumulated steps keeps its lambda.
inline LossState update_lambda(const LossState& s) {
  LossState out = s;
  if (s.steps > 0) out.lambda = s.epoch_distance_mean() / std::max(s.epoch_dice_mean(), LossState::kLambdaFloor);
  out.distance_sum = out.dice_sum = 0.0;
  out.steps = 0;
  return out;
}

namespace losses {

inline constexpr double kDiceSmooth = 1e-5;

/// Batch-level soft Dice loss on foreground probabilities (N, 1, D, H, W).
template <typename Scalar>
Var<Scalar> dice_loss(const Var<Scalar>& prob, const Tensor<Scalar>& target) {
  require_same_shape(prob.shape(), target.shape(), "dice_loss");
  const auto& p = prob.value().array();
  const auto& g = target.array();
  const double inter = (p * g).template cast<double>().sum();
  const double denom = p.template cast<double>().sum() + g.template cast<double>().sum() + kDiceSmooth;
  const double num = 2.0 * inter + kDiceSmooth;
  Tensor<Scalar> out(Shape{1}, static_cast<Scalar>(1.0 - num / denom));
  return Var<Scalar>::make(std::move(out), {prob}, [target, num, denom](Node<Scalar>& node) {
    auto* gp = node.parent_grad(0);
    if (!gp) return;
    // d/dP_i [1 - num/denom] = -(2 G_i denom - num) / denom^2
    const double up = static_cast<double>(node.grad[0]);
    const Scalar a = static_cast<Scalar>(-up * 2.0 / denom);
    const Scalar b = static_cast<Scalar>(up * num / (denom * denom));
    *gp += a * target.array() + b;
  });
}

/// Voxel-mean two-class cross-entropy from logits (N, 2, D, H, W).
template <typename Scalar>
Var<Scalar> ce_loss(const Var<Scalar>& logits, const Tensor<Scalar>& target) {
  require_rank5(logits.shape(), "ce_loss");
  if (logits.dim(1) != 2) throw ShapeError("ce_loss: expected 2 classes");
  const Index nb = logits.dim(0), s = logits.value().spatial();
  if (target.size() != nb * s) throw ShapeError("ce_loss: target " + to_string(target.shape()) + " vs logits " + to_string(logits.shape()));
  double total = 0.0;
  for (Index n = 0; n < nb; ++n) {
    const auto l = logits.value().sample_matrix(n);
    for (Index i = 0; i < s; ++i) {
      // -log softmax_y = softplus(l_other - l_y)
      const double z = static_cast<double>(target[n * s + i] > Scalar(0.5) ? l(i, 0) - l(i, 1) : l(i, 1) - l(i, 0));
      total += z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    }
  }
  const double count = static_cast<double>(nb * s);
  Tensor<Scalar> out(Shape{1}, static_cast<Scalar>(total / count));
  return Var<Scalar>::make(std::move(out), {logits}, [target, nb, s, count](Node<Scalar>& node) {
    auto* g = node.parent_grad(0);
    if (!g) return;
    const Tensor<Scalar>& lv = node.parent_value(0);
    const double up = static_cast<double>(node.grad[0]) / count;
    for (Index n = 0; n < nb; ++n) {
      const auto l = lv.sample_matrix(n);
      for (Index i = 0; i < s; ++i) {
        const double p1 = 1.0 / (1.0 + std::exp(static_cast<double>(l(i, 0) - l(i, 1))));
        const double y = target[n * s + i] > Scalar(0.5) ? 1.0 : 0.0;
        (*g)[(2 * n + 1) * s + i] += static_cast<Scalar>(up * (p1 - y));
        (*g)[2 * n * s + i] += static_cast<Scalar>(up * (y - p1));
      }
    }
  });
}

/// Batch mean of the per-sample anatomy-aware loss on probabilities
/// (N, 1, D, H, W) against masks of the same shape.
template <typename Scalar>
Var<Scalar> anatomy_aware(const Var<Scalar>& prob, const Tensor<Scalar>& target, const Spacing& spacing, double beta,
                          double epsilon) {
  require_rank5(prob.shape(), "anatomy_aware");
  require_same_shape(prob.shape(), target.shape(), "anatomy_aware");
  if (prob.dim(1) != 1) throw ShapeError("anatomy_aware: expects a single foreground channel");
  const Index nb = prob.dim(0), s = prob.value().spatial();
  const Triple sh = prob.value().spatial_shape();
  double total = 0.0;
  for (Index n = 0; n < nb; ++n)
    total += anatomy_aware_loss(prob.value().data() + n * s, target.data() + n * s, sh, spacing, beta, epsilon);
  Tensor<Scalar> out(Shape{1}, static_cast<Scalar>(total / static_cast<double>(nb)));
  return Var<Scalar>::make(std::move(out), {prob}, [target, nb, s, sh, spacing, beta, epsilon](Node<Scalar>& node) {
    auto* g = node.parent_grad(0);
    if (!g) return;
    const Tensor<Scalar>& pv = node.parent_value(0);
    const double k = static_cast<double>(node.grad[0]) / static_cast<double>(nb);
    for (Index n = 0; n < nb; ++n)
      anatomy_aware_loss(pv.data() + n * s, target.data() + n * s, sh, spacing, beta, epsilon, g->data() + n * s, k);
  });
}

template <typename Scalar>
struct CompoundLoss {
  Var<Scalar> total;
  double dice = 0.0;      ///< soft Dice loss
  double distance = 0.0;  ///< anatomy-aware loss (computed for every variant)
  double ce = 0.0;        ///< cross-entropy, when part of the variant
};

/// Combines the parts selected by the variant:
///   dice+ama: L_A + lambda * L_dice;  dice+ce: L_ce + L_dice;  dice;  ce.
template <typename Scalar>
CompoundLoss<Scalar> compound_loss(const Var<Scalar>& logits, const Tensor<Scalar>& target, const Spacing& spacing,
                                   const LossState& state, LossVariant variant) {
  CompoundLoss<Scalar> out;
  const auto prob = ops::foreground_probability(logits);
  const auto dice = dice_loss(prob, target);
  out.dice = static_cast<double>(dice.item());
  switch (variant) {
    case LossVariant::dice_ama: {
      const auto dist = anatomy_aware(prob, target, spacing, state.beta, state.epsilon);
      out.distance = static_cast<double>(dist.item());
      out.total = ops::add(dist, ops::scale(dice, static_cast<Scalar>(state.lambda)));
      return out;
    }
    case LossVariant::dice_ce: {
      const auto ce = ce_loss(logits, target);
      out.ce = static_cast<double>(ce.item());
      out.total = ops::add(ce, dice);
      break;
    }
    case LossVariant::dice:
      out.total = dice;
      break;
    case LossVariant::ce: {
      const auto ce = ce_loss(logits, target);
      out.ce = static_cast<double>(ce.item());
      out.total = ce;
      break;
    }
  }
  {
    NoGradGuard guard;
    out.distance = static_cast<double>(anatomy_aware(prob, target, spacing, state.beta, state.epsilon).item());
  }
  return out;
}

}  // namespace losses

}  // namespace ptseg
