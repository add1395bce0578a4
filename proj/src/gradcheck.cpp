#include "ptseg/harness/gradcheck.hpp"

#include "ptseg/core/rng.hpp"
#include "ptseg/losses/losses.hpp"
#include "ptseg/model/ptnet.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ptseg {

std::vector<GradcheckCase> loss_gradcheck(const GradcheckOptions& opt) {
  const Index n = prod(opt.shape);
  CounterRng rng(opt.seed);
  std::vector<GradcheckCase> out;
  for (int k = 0; k < opt.maps; ++k) {
    std::vector<double> P(n), G(n), grad(n, 0.0);
    for (Index i = 0; i < n; ++i) {
      P[i] = rng.uniform();
      G[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    std::string label = "random";
    if (k < opt.zero_prediction_maps) {
      std::fill(P.begin(), P.end(), 0.0);
      label = "P=0";
    } else if (k < opt.zero_prediction_maps + opt.zero_target_maps) {
      std::fill(G.begin(), G.end(), 0.0);
      label = "G=0";
    }
    anatomy_aware_loss(P.data(), G.data(), opt.shape, opt.spacing, opt.beta, opt.epsilon, grad.data());
    double err = 0.0, scale = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double keep = P[i];
      P[i] = keep + opt.h;
      const double up = anatomy_aware_loss(P.data(), G.data(), opt.shape, opt.spacing, opt.beta, opt.epsilon);
      P[i] = keep - opt.h;
      const double down = anatomy_aware_loss(P.data(), G.data(), opt.shape, opt.spacing, opt.beta, opt.epsilon);
      P[i] = keep;
      const double fd = (up - down) / (2.0 * opt.h);
      err = std::max(err, std::abs(fd - grad[i]));
      scale = std::max({scale, std::abs(fd), std::abs(grad[i])});
    }
    out.push_back({label + " #" + std::to_string(k), scale > 0 ? err / scale : err});
  }
  return out;
}

ModelConfig gradcheck_model_config() {
  ModelConfig c = ModelConfig::toy();
  c.base_channels = 2;
  c.patch_size = {8, 16, 16};  // smallest patch whose stages all keep >1 voxel
  c.heads_per_stage = {1, 2, 2, 4};
  c.mlp_ratio = 2.0;
  return c;
}

std::vector<GradcheckCase> model_gradcheck(std::uint64_t seed, int samples, double h, double rel_floor) {
  const ModelConfig cfg = gradcheck_model_config();
  PTNet<double> model(cfg, seed);
  CounterRng rng = CounterRng(seed).fork(17);
  const Triple p = cfg.patch_size;
  Tensor<double> x(Shape{1, cfg.n_modalities, p[0], p[1], p[2]});
  for (Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
  Tensor<double> y(Shape{1, 1, p[0], p[1], p[2]});
  for (Index d = 1; d < 3; ++d)
    for (Index hh = 3; hh < 9; ++hh)
      for (Index w = 4; w < 11; ++w) y[flat_index(p, d, hh, w)] = 1.0;
  LossState state;
  const Spacing spacing{4.0, 0.4, 0.4};
  auto loss = [&]() { return losses::compound_loss(model.forward(x), y, spacing, state, LossVariant::dice_ama).total; };

  model.parameters().zero_grad();
  loss().backward();

  auto& entries = model.parameters().entries();
  const Index total = model.parameters().count();
  double gmax = 0.0;
  for (auto& [name, var] : entries)
    for (Index i = 0; i < var.grad().size(); ++i) gmax = std::max(gmax, std::abs(var.grad()[i]));
  const double floor = rel_floor * gmax;
  std::vector<GradcheckCase> out;
  for (int s = 0; s < samples; ++s) {
    Index flat = static_cast<Index>(rng.below(static_cast<std::uint64_t>(total)));
    std::size_t e = 0;
    while (flat >= entries[e].second.value().size()) flat -= entries[e++].second.value().size();
    auto& var = entries[e].second;
    const double analytic = var.grad()[flat];
    double& w = var.mutable_value()[flat];
    const double keep = w;
    w = keep + h;
    const double up = loss().item();
    w = keep - h;
    const double down = loss().item();
    w = keep;
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), floor});
    std::ostringstream label;
    label << entries[e].first << '[' << flat << "] analytic=" << analytic << " fd=" << fd;
    out.push_back({label.str(), err});
  }
  return out;
}

}  // namespace ptseg
