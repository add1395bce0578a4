#pragma once

#include "ptseg/data/volume.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ptseg {

enum class Tissue : std::uint8_t { background = 0, gland = 1, tumor = 2, vessel = 3, muscle = 4 };
inline constexpr int kTissueCount = 5;

struct IntensityStats {
  double mean = 0.0;
  double sd = 0.0;
};

/// Per-tissue intensity model of one modality, indexed by Tissue.
struct IntensityProfile {
  std::string name;
  std::array<IntensityStats, kTissueCount> tissue{};
  const IntensityStats& operator[](Tissue t) const { return tissue[static_cast<int>(t)]; }
};

/// Three channels standing in for T1, T2 and STIR. The vessel matches the
/// tumor in the first channel, the muscle in the last two; each differs
/// from the tumor elsewhere.
std::vector<IntensityProfile> default_profiles();

struct PhantomSpec {
  Triple shape{16, 64, 64};
  Spacing spacing{4.0, 0.4, 0.4};
  double tumor_cc_lo = 1.0;
  double tumor_cc_hi = 2.0;
  int n_distractors = 2;
  std::vector<IntensityProfile> profiles = default_profiles();
  double noise_scale = 1.0;  ///< multiplies every tissue sd; 0 disables noise
  std::uint64_t seed = 0;
  std::string case_id = "case";

  /// Throws std::invalid_argument.
  void validate() const;
};

/// Tissue label per voxel (C order) before intensities are drawn.
std::vector<Tissue> phantom_labels(const PhantomSpec& spec);

/// One ellipsoidal tumor (the mask), a gland around it, vessel/muscle
/// distractors, Gaussian noise, clamped to [0,1].
MultimodalVolume generate_phantom(const PhantomSpec& spec);

/// A reproducible collection of phantoms: case i uses a seed derived from
/// (seed, i) and the id "case_%03d".
struct PhantomSet {
  int count = 40;
  std::uint64_t seed = 42;
  PhantomSpec base;
};

PhantomSpec case_spec(const PhantomSet& set, int index);
std::vector<MultimodalVolume> generate_set(const PhantomSet& set);

}  // namespace ptseg
