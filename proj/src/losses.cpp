#include "ptseg/losses/losses.hpp"

namespace ptseg {

LossVariant parse_loss_variant(const std::string& s) {
  if (s == "dice+ama") return LossVariant::dice_ama;
  if (s == "dice+ce") return LossVariant::dice_ce;
  if (s == "dice") return LossVariant::dice;
  if (s == "ce") return LossVariant::ce;
  throw std::invalid_argument("unknown loss variant '" + s + "' (expected ce, dice, dice+ce or dice+ama)");
}

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::dice_ama: return "dice+ama";
    case LossVariant::dice_ce: return "dice+ce";
    case LossVariant::dice: return "dice";
    case LossVariant::ce: return "ce";
  }
  return "?";
}

}  // namespace ptseg
