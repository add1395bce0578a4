#pragma once

#include "ptseg/data/phantom.hpp"
#include "ptseg/losses/losses.hpp"
#include "ptseg/model/config.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptseg {

/// Everything a training run depends on. JSON keys mirror the field names.
struct TrainConfig {
  int epochs = 10;
  int steps_per_epoch = 25;
  int batch_size = 2;
  double lr0 = 0.01;
  double momentum = 0.95;
  LossVariant loss = LossVariant::dice_ama;
  double beta = 1.5;
  double epsilon = 1e-8;
  double lambda0 = 1.0;
  int folds = 5;
  int fold = 0;
  std::uint64_t seed = 42;
  double overlap = 0.5;
  ModelConfig model = ModelConfig::toy();
  PhantomSet phantoms;  ///< how the profile's dataset is generated
  std::string data;
  std::string out;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their current values, so a file can override a subset.
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const PhantomSet& s);
void from_json(const nlohmann::json& j, PhantomSet& s);

struct TrainLogRow {
  int epoch = 0;
  double lr = 0, lambda = 0, loss_total = 0, loss_dice = 0, loss_dist = 0, val_dice = 0;
  double val_dist = 0;  ///< anatomy-aware loss of the validation predictions
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::vector<std::string> train_ids, val_ids;
  int best_epoch = -1;
  double best_val_dice = -1.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs epochs x steps of SGD over the fold's training cases, validating with
/// sliding-window inference after each epoch. Writes to cfg.out:
/// train_log.csv, val_log.csv, fold.json, config.json, checkpoint_best.ptck,
/// checkpoint_final.ptck.
TrainResult train(const TrainConfig& cfg, const std::vector<MultimodalVolume>& cases, std::ostream* progress = nullptr);

inline constexpr const char* kTrainLogHeader = "epoch,lr,lambda,loss_total,loss_dice,loss_dist,val_dice";

std::vector<TrainLogRow> read_train_log(const std::filesystem::path& csv);

}  // namespace ptseg
