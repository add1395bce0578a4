#pragma once

#include "ptseg/data/volume.hpp"
#include "ptseg/metrics/metrics.hpp"
#include "ptseg/model/ptnet.hpp"

#include <functional>
#include <vector>

namespace ptseg {

/// (N, M, d, h, w) patches -> (N, 1, d, h, w) foreground probabilities.
using ProbabilityFn = std::function<Tensor<float>(const Tensor<float>&)>;

/// Tile origins along one axis: a single tile when the axis fits in one
/// patch, otherwise evenly spread starts with step <= patch * (1 - overlap)
/// and the last tile flush with the end.
std::vector<Index> tile_starts(Index dim, Index patch, double overlap);

/// Separable Gaussian weight over a patch, sigma = patch / 8, peak 1.
std::vector<float> gaussian_importance(const Triple& patch);

struct InferenceResult {
  Triple shape{};
  std::vector<float> probability;
  Mask mask;  ///< probability > 0.5
};

/// Weighted overlap-tile inference. Uses the first `modalities` channels of
/// the volume; fewer channels than requested is an error.
InferenceResult sliding_window_infer(const ProbabilityFn& fn, const MultimodalVolume& v, const Triple& patch,
                                     int modalities, double overlap = 0.5, int tile_batch = 2);

InferenceResult sliding_window_infer(const PTNet<float>& model, const MultimodalVolume& v, double overlap = 0.5);

/// The network's foreground probability without recording a graph.
ProbabilityFn probability_fn(const PTNet<float>& model);

}  // namespace ptseg
