#pragma once

#include "ptseg/core/tensor.hpp"
#include "ptseg/model/config.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ptseg {

/// One finite-difference comparison. The error is scaled by the gradient's
/// magnitude: max_i |a_i - f_i| / max(max_i |a_i|, max_i |f_i|).
struct GradcheckCase {
  std::string label;
  double max_rel_error = 0.0;
};

struct GradcheckOptions {
  std::uint64_t seed = 1;
  int maps = 50;
  Triple shape{4, 6, 6};
  Spacing spacing{4.0, 0.4, 0.4};
  double beta = 1.5;
  double epsilon = 1e-8;
  double h = 1e-5;
  int zero_target_maps = 5;      ///< G == 0
  int zero_prediction_maps = 0;  ///< P == 0 (outside the open domain; see README)
};

/// Analytic vs central differences of the anatomy-aware loss w.r.t. P in
/// 64-bit. Random maps draw P ~ U(0,1) and G ~ Bernoulli(0.3).
std::vector<GradcheckCase> loss_gradcheck(const GradcheckOptions& opt);

/// Tiny double-precision network for gradient checks.
ModelConfig gradcheck_model_config();

/// d(dice+ama compound loss)/d(parameter) for `samples` scalar parameters
/// drawn uniformly over all parameters; each case is one scalar with error
/// |a - f| / max(|a|, |f|, rel_floor * max|grad|). The floor keeps
/// parameters whose gradient is below central-difference round-off from
/// dominating; typical gradients are ~1e-6, hence the 1e-4 step.
std::vector<GradcheckCase> model_gradcheck(std::uint64_t seed, int samples = 24, double h = 1e-4, double rel_floor = 1e-3);

}  // namespace ptseg
