#include "ptseg/data/sampling.hpp"

#include <algorithm>
#include <stdexcept>

namespace ptseg {

namespace {

/// Admissible origin range along one axis: the patch stays inside the volume
/// when it fits, otherwise it covers the whole axis.
std::pair<Index, Index> origin_range(Index dim, Index patch) {
  return {std::min<Index>(0, dim - patch), std::max<Index>(0, dim - patch)};
}

Index uniform_in(CounterRng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

}  // namespace

Patch crop_patch(const MultimodalVolume& v, const std::array<Index, 3>& origin, const Triple& ps) {
  Patch p;
  const Index m_count = v.n_modalities();
  p.intensities = Tensor<float>(Shape{m_count, ps[0], ps[1], ps[2]});
  p.mask.assign(static_cast<std::size_t>(prod(ps)), 0);
  p.origin = origin;
  for (int a = 0; a < 3; ++a) {
    p.pad_lo[a] = std::max<Index>(0, -origin[a]);
    p.pad_hi[a] = std::max<Index>(0, origin[a] + ps[a] - v.shape[a]);
  }
  const Index pn = prod(ps), vn = v.voxels();
  for (Index d = 0; d < ps[0]; ++d) {
    const Index sd = origin[0] + d;
    if (sd < 0 || sd >= v.shape[0]) continue;
    for (Index h = 0; h < ps[1]; ++h) {
      const Index sh = origin[1] + h;
      if (sh < 0 || sh >= v.shape[1]) continue;
      const Index w0 = std::max<Index>(0, -origin[2]);
      const Index w1 = std::min<Index>(ps[2], v.shape[2] - origin[2]);
      if (w1 <= w0) continue;
      const Index dst = flat_index(ps, d, h, w0);
      const Index src = flat_index(v.shape, sd, sh, origin[2] + w0);
      for (Index m = 0; m < m_count; ++m)
        std::copy_n(v.intensities.data() + m * vn + src, w1 - w0, p.intensities.data() + m * pn + dst);
      std::copy_n(v.mask.data() + src, w1 - w0, p.mask.data() + dst);
    }
  }
  p.contains_foreground = std::any_of(p.mask.begin(), p.mask.end(), [](std::uint8_t x) { return x != 0; });
  return p;
}

std::vector<Patch> sample_batch(const std::vector<MultimodalVolume>& volumes, const Triple& ps, int batch_size,
                                CounterRng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_batch: batch_size must be >= 1");
  if (volumes.empty()) throw std::invalid_argument("sample_batch: empty volume pool");
  for (int a = 0; a < 3; ++a)
    if (ps[a] < 1) throw std::invalid_argument("sample_batch: patch size must be positive");

  std::vector<std::size_t> bearing;
  for (std::size_t i = 0; i < volumes.size(); ++i)
    if (volumes[i].foreground_voxels() > 0) bearing.push_back(i);
  if (bearing.empty())
    throw std::runtime_error("sample_batch: no volume in the pool of " + std::to_string(volumes.size()) +
                             " contains foreground; the half-foreground rule cannot be met");

  const int forced = (batch_size + 1) / 2;
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    std::size_t vi;
    std::array<Index, 3> origin{};
    if (b < forced) {
      vi = bearing[rng.below(bearing.size())];
      const auto& v = volumes[vi];
      // k-th foreground voxel, k uniform
      Index k = uniform_in(rng, 0, v.foreground_voxels() - 1);
      Index flat = 0;
      for (; flat < v.voxels(); ++flat)
        if (v.mask[flat] && k-- == 0) break;
      const std::array<Index, 3> voxel{flat / (v.shape[1] * v.shape[2]), (flat / v.shape[2]) % v.shape[1], flat % v.shape[2]};
      for (int a = 0; a < 3; ++a) {
        const Index jitter = uniform_in(rng, -(ps[a] / 4), ps[a] / 4);
        const auto [lo, hi] = origin_range(v.shape[a], ps[a]);
        origin[a] = std::clamp(voxel[a] - ps[a] / 2 + jitter, lo, hi);
      }
    } else {
      vi = rng.below(volumes.size());
      for (int a = 0; a < 3; ++a) {
        const auto [lo, hi] = origin_range(volumes[vi].shape[a], ps[a]);
        origin[a] = uniform_in(rng, lo, hi);
      }
    }
    Patch p = crop_patch(volumes[vi], origin, ps);
    p.source = vi;
    out.push_back(std::move(p));
  }
  return out;
}

Tensor<float> stack_intensities(const std::vector<Patch>& patches, int modalities) {
  if (patches.empty()) throw std::invalid_argument("stack_intensities: no patches");
  const auto& s0 = patches.front().intensities.shape();
  if (modalities < 1 || modalities > s0[0])
    throw std::invalid_argument("stack_intensities: requested " + std::to_string(modalities) + " of " +
                                std::to_string(s0[0]) + " modalities");
  const Index nb = static_cast<Index>(patches.size()), pn = s0[1] * s0[2] * s0[3];
  Tensor<float> out(Shape{nb, modalities, s0[1], s0[2], s0[3]});
  for (Index n = 0; n < nb; ++n) {
    require_same_shape(patches[n].intensities.shape(), s0, "stack_intensities");
    std::copy_n(patches[n].intensities.data(), modalities * pn, out.data() + n * modalities * pn);
  }
  return out;
}

Tensor<float> stack_masks(const std::vector<Patch>& patches) {
  if (patches.empty()) throw std::invalid_argument("stack_masks: no patches");
  const auto& s0 = patches.front().intensities.shape();
  const Index nb = static_cast<Index>(patches.size()), pn = s0[1] * s0[2] * s0[3];
  Tensor<float> out(Shape{nb, 1, s0[1], s0[2], s0[3]});
  for (Index n = 0; n < nb; ++n)
    for (Index i = 0; i < pn; ++i) out[n * pn + i] = patches[n].mask[i] ? 1.0f : 0.0f;
  return out;
}

}  // namespace ptseg
