#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ptseg {

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Seeded shuffle, then k contiguous validation blocks whose sizes differ by
/// at most one. Throws std::invalid_argument if k < 2 or there are fewer
/// cases than folds.
std::vector<Fold> kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed);

}  // namespace ptseg
