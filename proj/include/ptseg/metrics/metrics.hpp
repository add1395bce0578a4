#pragma once

#include "ptseg/core/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ptseg {

using Mask = std::vector<std::uint8_t>;

struct Confusion {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const Mask& pred, const Mask& gt);

// Both masks empty -> 1; exactly one empty -> 0.
double precision(const Confusion& c);
double recall(const Confusion& c);
double dice(const Confusion& c);

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the volume.
Mask surface_voxels(const Mask& m, const Triple& shape);

/// Squared physical distance (mm^2) from every voxel to the nearest nonzero
/// voxel of `sites`; infinity when there are none.
std::vector<double> squared_distance_transform(const Mask& sites, const Triple& shape, const Spacing& spacing);

struct SurfaceDistances {
  double hd95 = 0.0;
  double asd = 0.0;            ///< mean over prediction surface of d(p, G)
  double asd_symmetric = 0.0;  ///< mean over both surfaces; reported only
};

/// HD95 is the linearly interpolated 95th percentile of the pooled directed
/// surface distances of both directions. One empty mask -> the physical
/// diagonal for every distance; both empty -> 0.
SurfaceDistances surface_distances(const Mask& pred, const Mask& gt, const Triple& shape, const Spacing& spacing);

/// Linear-interpolation percentile (q in [0,1]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

enum class VolumeGroup { A, B, C };
std::string to_string(VolumeGroup g);

struct GroupThresholds {
  double lo = 4.0;
  double hi = 10.0;
};

/// > hi -> A, [lo, hi] -> B, < lo -> C.
VolumeGroup assign_group(double tumor_volume_cc, const GroupThresholds& t = {});

struct CaseMetrics {
  std::string case_id;
  double precision = 0, recall = 0, dice = 0, hd95_mm = 0, asd_mm = 0;
  double tumor_volume_cc = 0;
  VolumeGroup group = VolumeGroup::C;
};

CaseMetrics evaluate_case(const std::string& case_id, const Mask& pred, const Mask& gt, const Triple& shape,
                          const Spacing& spacing, const GroupThresholds& t = {});

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;  ///< population standard deviation
  std::size_t count = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  /// "overall", "A", "B", "C" -> metric name -> aggregate; empty groups omitted.
  std::map<std::string, std::map<std::string, Aggregate>> groups;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"precision", "recall", "dice", "hd95_mm", "asd_mm"};
  return names;
}
double metric_value(const CaseMetrics& c, const std::string& name);

MetricsReport build_report(const std::vector<CaseMetrics>& cases);

/// Writes per-case rows plus aggregate rows as CSV, and the full report as JSON.
void emit_report(const MetricsReport& report, const std::filesystem::path& csv_path, const std::filesystem::path& json_path);

}  // namespace ptseg
