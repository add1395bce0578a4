#include "ptseg/harness/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ptseg {

std::vector<Index> tile_starts(Index dim, Index patch, double overlap) {
  if (dim < 1 || patch < 1) throw std::invalid_argument("tile_starts: sizes must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("tile_starts: overlap must be in [0,1)");
  if (dim <= patch) return {0};
  // integer step so rounded starts never exceed it
  const Index step = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
  const Index n = (dim - patch + step - 1) / step + 1;
  std::vector<Index> out;
  for (Index i = 0; i < n; ++i)
    out.push_back(static_cast<Index>(std::llround(static_cast<double>(i) * static_cast<double>(dim - patch) / static_cast<double>(n - 1))));
  return out;
}

std::vector<float> gaussian_importance(const Triple& p) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double c = 0.5 * static_cast<double>(p[a] - 1), sigma = static_cast<double>(p[a]) / 8.0;
    for (Index i = 0; i < p[a]; ++i) axis[a].push_back(std::exp(-0.5 * std::pow((i - c) / sigma, 2)));
    const double peak = *std::max_element(axis[a].begin(), axis[a].end());
    for (auto& x : axis[a]) x /= peak;
  }
  std::vector<float> w(static_cast<std::size_t>(prod(p)));
  Index k = 0;
  for (Index d = 0; d < p[0]; ++d)
    for (Index h = 0; h < p[1]; ++h)
      for (Index x = 0; x < p[2]; ++x) w[k++] = static_cast<float>(axis[0][d] * axis[1][h] * axis[2][x]);
  return w;
}

InferenceResult sliding_window_infer(const ProbabilityFn& fn, const MultimodalVolume& v, const Triple& patch,
                                     int modalities, double overlap, int tile_batch) {
  if (modalities < 1 || v.n_modalities() < modalities)
    throw std::invalid_argument("sliding_window_infer: model needs " + std::to_string(modalities) +
                                " modalities, volume " + v.case_id + " has " + std::to_string(v.n_modalities()));
  const Triple sh = v.shape;
  const auto weight = gaussian_importance(patch);
  std::vector<double> acc(static_cast<std::size_t>(v.voxels()), 0.0), wsum(acc.size(), 0.0);

  std::vector<std::array<Index, 3>> origins;
  for (Index d : tile_starts(sh[0], patch[0], overlap))
    for (Index h : tile_starts(sh[1], patch[1], overlap))
      for (Index w : tile_starts(sh[2], patch[2], overlap)) origins.push_back({d, h, w});

  const Index pn = prod(patch), vn = v.voxels();
  for (std::size_t first = 0; first < origins.size(); first += static_cast<std::size_t>(tile_batch)) {
    const std::size_t count = std::min<std::size_t>(tile_batch, origins.size() - first);
    Tensor<float> batch(Shape{static_cast<Index>(count), modalities, patch[0], patch[1], patch[2]});
    for (std::size_t t = 0; t < count; ++t) {
      const auto& o = origins[first + t];
      for (Index m = 0; m < modalities; ++m)
        for (Index d = 0; d < patch[0] && o[0] + d < sh[0]; ++d)
          for (Index h = 0; h < patch[1] && o[1] + h < sh[1]; ++h)
            for (Index w = 0; w < patch[2] && o[2] + w < sh[2]; ++w)
              batch[((static_cast<Index>(t) * modalities + m) * patch[0] + d) * patch[1] * patch[2] + h * patch[2] + w] =
                  v.intensities[m * vn + flat_index(sh, o[0] + d, o[1] + h, o[2] + w)];
    }
    const Tensor<float> prob = fn(batch);
    if (prob.size() != static_cast<Index>(count) * pn) throw ShapeError("sliding_window_infer: predictor returned " + to_string(prob.shape()));
    for (std::size_t t = 0; t < count; ++t) {
      const auto& o = origins[first + t];
      for (Index d = 0; d < patch[0] && o[0] + d < sh[0]; ++d)
        for (Index h = 0; h < patch[1] && o[1] + h < sh[1]; ++h)
          for (Index w = 0; w < patch[2] && o[2] + w < sh[2]; ++w) {
            const Index pi = flat_index(patch, d, h, w);
            const Index vi = flat_index(sh, o[0] + d, o[1] + h, o[2] + w);
            acc[vi] += static_cast<double>(weight[pi]) * prob[static_cast<Index>(t) * pn + pi];
            wsum[vi] += weight[pi];
          }
    }
  }

  InferenceResult r;
  r.shape = sh;
  r.probability.resize(acc.size());
  r.mask.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    r.probability[i] = static_cast<float>(acc[i] / wsum[i]);
    r.mask[i] = r.probability[i] > 0.5f ? 1 : 0;
  }
  return r;
}

ProbabilityFn probability_fn(const PTNet<float>& model) {
  return [&model](const Tensor<float>& batch) {
    NoGradGuard guard;
    return ops::foreground_probability(model.forward(batch)).value();
  };
}

InferenceResult sliding_window_infer(const PTNet<float>& model, const MultimodalVolume& v, double overlap) {
  return sliding_window_infer(probability_fn(model), v, model.config().patch_size, model.config().n_modalities, overlap);
}

}  // namespace ptseg
