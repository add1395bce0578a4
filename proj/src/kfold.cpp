#include "ptseg/harness/kfold.hpp"

#include "ptseg/core/rng.hpp"

#include <stdexcept>

namespace ptseg {

std::vector<Fold> kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (static_cast<int>(case_ids.size()) < k)
    throw std::invalid_argument("kfold_split: " + std::to_string(case_ids.size()) + " cases cannot fill " +
                                std::to_string(k) + " folds");
  std::vector<std::string> ids = case_ids;
  CounterRng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);

  const std::size_t n = ids.size(), base = n / k, extra = n % k;
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  std::size_t start = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) (i >= start && i < start + len ? folds[f].val : folds[f].train).push_back(ids[i]);
    start += len;
  }
  return folds;
}

}  // namespace ptseg
