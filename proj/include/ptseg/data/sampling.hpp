#pragma once

#include "ptseg/core/rng.hpp"
#include "ptseg/data/volume.hpp"

#include <vector>

namespace ptseg {

/// Fixed-size crop; out-of-volume voxels are zero and recorded as padding.
struct Patch {
  Tensor<float> intensities;  ///< (M, d, h, w)
  std::vector<std::uint8_t> mask;
  bool contains_foreground = false;
  std::array<Index, 3> origin{};  ///< may be negative when padded
  Triple pad_lo{};
  Triple pad_hi{};
  std::size_t source = 0;  ///< index into the volume pool
};

Patch crop_patch(const MultimodalVolume& v, const std::array<Index, 3>& origin, const Triple& patch_size);

/// The first ceil(B/2) patches are centred (with jitter) on a uniformly drawn
/// tumor voxel of a uniformly drawn tumor-bearing volume; the rest are
/// uniform random crops.
std::vector<Patch> sample_batch(const std::vector<MultimodalVolume>& volumes, const Triple& patch_size, int batch_size,
                                CounterRng& rng);

/// Stacks patches into an (N, modalities, d, h, w) tensor using the first
/// `modalities` channels, and the masks into (N, 1, d, h, w).
Tensor<float> stack_intensities(const std::vector<Patch>& patches, int modalities);
Tensor<float> stack_masks(const std::vector<Patch>& patches);

}  // namespace ptseg
