#pragma once

#include <cmath>
#include <stdexcept>

namespace ptseg {

/// Polynomial decay lr0 * (1 - epoch/epochs)^0.9, evaluated at epoch start.
inline double lr_schedule(int epoch, int epochs, double lr0) {
  if (epochs < 1 || epoch < 0 || epoch >= epochs) throw std::out_of_range("lr_schedule: epoch outside [0, epochs)");
  return lr0 * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(epochs), 0.9);
}

}  // namespace ptseg
