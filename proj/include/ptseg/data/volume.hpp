#pragma once

#include "ptseg/core/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptseg {

/// Raised on malformed or inconsistent case data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Co-registered per-modality intensities plus ground-truth mask.
///
/// intensities has shape (M, D, H, W); mask is D*H*W bytes in C order.
/// A prediction case is stored the same way with M = 0.
struct MultimodalVolume {
  std::string case_id;
  Triple shape{};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::string> modality_names;
  Tensor<float> intensities;
  std::vector<std::uint8_t> mask;

  Index voxels() const { return prod(shape); }
  int n_modalities() const { return static_cast<int>(modality_names.size()); }
  const float* modality(int m) const { return intensities.data() + m * voxels(); }
  float* modality(int m) { return intensities.data() + m * voxels(); }

  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }
  Index foreground_voxels() const;
  double tumor_volume_cc() const { return static_cast<double>(foreground_voxels()) * voxel_volume_mm3() / 1000.0; }

  /// Physical length of the volume diagonal in mm.
  double diagonal_mm() const;

  /// Throws DataError when shapes, spacing or mask values are inconsistent.
  void validate() const;
};

/// Writes `<dir>/meta.json`, `<dir>/mod_<k>.raw` and `<dir>/mask.raw`.
void save_volume(const MultimodalVolume& v, const std::filesystem::path& dir);
MultimodalVolume load_volume(const std::filesystem::path& dir);

/// Case directories (those holding a meta.json) under root, sorted by name.
std::vector<std::filesystem::path> list_cases(const std::filesystem::path& root);
std::vector<MultimodalVolume> load_dataset(const std::filesystem::path& root);

/// Per-modality z-score over the whole volume; constant modalities become 0.
MultimodalVolume normalize(const MultimodalVolume& v);

}  // namespace ptseg
