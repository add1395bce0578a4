#include "ptseg/harness/train.hpp"

#include "ptseg/data/sampling.hpp"
#include "ptseg/harness/checkpoint.hpp"
#include "ptseg/harness/inference.hpp"
#include "ptseg/harness/kfold.hpp"
#include "ptseg/harness/optimizer.hpp"
#include "ptseg/harness/schedule.hpp"
#include "ptseg/metrics/metrics.hpp"
#include "ptseg/model/ptnet.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace ptseg {

namespace fs = std::filesystem;

namespace {

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

Triple triple_of(const nlohmann::json& j) {
  const auto v = j.get<std::vector<Index>>();
  if (v.size() != 3) throw std::invalid_argument("expected 3 components, got " + j.dump());
  return {v[0], v[1], v[2]};
}

Spacing spacing_of(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw std::invalid_argument("expected 3 components, got " + j.dump());
  return {v[0], v[1], v[2]};
}

constexpr std::uint64_t kSamplerStream = 1000;

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (steps_per_epoch < 1) fail("steps_per_epoch must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr0 > 0)) fail("lr0 must be > 0");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0,1)");
  if (!(beta > 0)) fail("beta must be > 0");
  if (!(epsilon > 0)) fail("epsilon must be > 0");
  if (!(lambda0 > 0)) fail("lambda0 must be > 0");
  if (folds < 2) fail("folds must be >= 2");
  if (fold < 0 || fold >= folds) fail("fold index must be < folds");
  if (!(overlap >= 0 && overlap < 1)) fail("overlap must be in [0,1)");
  model.validate();
}

void to_json(nlohmann::json& j, const PhantomSet& s) {
  const auto& b = s.base;
  j = {{"count", s.count},
       {"seed", s.seed},
       {"shape", {b.shape[0], b.shape[1], b.shape[2]}},
       {"spacing", {b.spacing[0], b.spacing[1], b.spacing[2]}},
       {"tumor_cc", {b.tumor_cc_lo, b.tumor_cc_hi}},
       {"distractors", b.n_distractors},
       {"noise_scale", b.noise_scale}};
}

void from_json(const nlohmann::json& j, PhantomSet& s) {
  read_if(j, "count", s.count);
  read_if(j, "seed", s.seed);
  if (j.contains("shape")) s.base.shape = triple_of(j.at("shape"));
  if (j.contains("spacing")) s.base.spacing = spacing_of(j.at("spacing"));
  if (j.contains("tumor_cc")) {
    const auto v = j.at("tumor_cc").get<std::vector<double>>();
    if (v.size() != 2) throw std::invalid_argument("tumor_cc must be [lo, hi]");
    s.base.tumor_cc_lo = v[0];
    s.base.tumor_cc_hi = v[1];
  }
  read_if(j, "distractors", s.base.n_distractors);
  read_if(j, "noise_scale", s.base.noise_scale);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},   {"steps_per_epoch", c.steps_per_epoch}, {"batch_size", c.batch_size},
       {"lr0", c.lr0},         {"momentum", c.momentum},               {"loss", to_string(c.loss)},
       {"beta", c.beta},       {"epsilon", c.epsilon},                 {"lambda0", c.lambda0},
       {"folds", c.folds},     {"fold", c.fold},                       {"seed", c.seed},
       {"overlap", c.overlap}, {"model", c.model},                     {"phantoms", c.phantoms},
       {"data", c.data},       {"out", c.out}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  read_if(j, "epochs", c.epochs);
  read_if(j, "steps_per_epoch", c.steps_per_epoch);
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "lr0", c.lr0);
  read_if(j, "momentum", c.momentum);
  if (j.contains("loss")) c.loss = parse_loss_variant(j.at("loss").get<std::string>());
  read_if(j, "beta", c.beta);
  read_if(j, "epsilon", c.epsilon);
  read_if(j, "lambda0", c.lambda0);
  read_if(j, "folds", c.folds);
  read_if(j, "fold", c.fold);
  read_if(j, "seed", c.seed);
  read_if(j, "overlap", c.overlap);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.is_string()) {
      // named presets; an object spells the architecture out
      if (m == "toy") c.model = ModelConfig::toy();
      else if (m == "paper") c.model = ModelConfig::paper();
      else throw std::invalid_argument("unknown model preset '" + m.get<std::string>() + "' (toy|paper)");
    } else {
      from_json(m, c.model);
    }
  }
  if (j.contains("phantoms")) from_json(j.at("phantoms"), c.phantoms);
  read_if(j, "data", c.data);
  read_if(j, "out", c.out);
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  TrainConfig c;
  try {
    from_json(nlohmann::json::parse(in), c);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed config " + path.string() + ": " + e.what());
  }
  return c;
}

std::vector<TrainLogRow> read_train_log(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open " + csv.string());
  std::string line;
  std::getline(in, line);
  if (line != kTrainLogHeader) throw std::runtime_error(csv.string() + ": unexpected header '" + line + "'");
  std::vector<TrainLogRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    TrainLogRow r;
    if (!(ss >> r.epoch >> r.lr >> r.lambda >> r.loss_total >> r.loss_dice >> r.loss_dist >> r.val_dice))
      throw std::runtime_error(csv.string() + ": malformed row");
    rows.push_back(r);
  }
  return rows;
}

TrainResult train(const TrainConfig& cfg, const std::vector<MultimodalVolume>& cases, std::ostream* progress) {
  cfg.validate();
  if (cases.empty()) throw std::invalid_argument("train: no cases");
  const int modalities = cfg.model.n_modalities;

  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.case_id);
  const auto folds = kfold_split(ids, cfg.folds, cfg.seed);
  const Fold& fold = folds[static_cast<std::size_t>(cfg.fold)];
  const std::unordered_set<std::string> val_set(fold.val.begin(), fold.val.end());

  std::vector<MultimodalVolume> train_vols, val_vols;
  for (const auto& c : cases) {
    if (c.n_modalities() < modalities)
      throw std::invalid_argument("case " + c.case_id + " has " + std::to_string(c.n_modalities()) +
                                  " modalities, model needs " + std::to_string(modalities));
    (val_set.count(c.case_id) ? val_vols : train_vols).push_back(normalize(c));
  }
  const Spacing spacing = train_vols.front().spacing;
  for (const auto& v : train_vols)
    if (v.spacing != spacing) throw std::invalid_argument("train: all training cases must share one voxel spacing");

  TrainResult result;
  result.train_ids = fold.train;
  result.val_ids = fold.val;

  const fs::path out = cfg.out.empty() ? fs::path(".") : fs::path(cfg.out);
  fs::create_directories(out);
  {
    nlohmann::json j = cfg;
    std::ofstream(out / "config.json") << j.dump(2) << '\n';
    nlohmann::json f{{"fold", cfg.fold}, {"folds", cfg.folds}, {"train", fold.train}, {"val", fold.val}};
    std::ofstream(out / "fold.json") << f.dump(2) << '\n';
  }
  std::ofstream log(out / "train_log.csv");
  std::ofstream vlog(out / "val_log.csv");
  if (!log || !vlog) throw std::runtime_error("cannot write logs under " + out.string());
  log << kTrainLogHeader << '\n' << std::setprecision(17);
  vlog << "epoch,val_dice,val_dist\n" << std::setprecision(17);

  PTNet<float> model(cfg.model, cfg.seed);
  SgdNesterov<float> opt(cfg.momentum);
  LossState state;
  state.beta = cfg.beta;
  state.epsilon = cfg.epsilon;
  state.lambda = cfg.lambda0;
  state.validate();
  const CounterRng root(cfg.seed);

  auto checkpoint = [&](const fs::path& p, int epoch, double lr) {
    CheckpointMeta meta{epoch, state.lambda, lr, cfg.momentum, to_string(cfg.loss), modalities};
    save_checkpoint(p, cfg.model, model.parameters(), meta);
  };

  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = lr_schedule(e, cfg.epochs, cfg.lr0);
    TrainLogRow row;
    row.epoch = e;
    row.lr = lr;
    row.lambda = state.lambda;
    double sum_total = 0.0, sum_dice = 0.0, sum_dist = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const std::uint64_t stream = kSamplerStream + static_cast<std::uint64_t>(e) * cfg.steps_per_epoch + s;
      CounterRng rng = root.fork(stream);
      const auto batch = sample_batch(train_vols, cfg.model.patch_size, cfg.batch_size, rng);
      const auto x = stack_intensities(batch, modalities);
      const auto y = stack_masks(batch);
      const auto logits = model.forward(x);
      const auto parts = losses::compound_loss(logits, y, spacing, state, cfg.loss);
      const double total = static_cast<double>(parts.total.item());
      if (!std::isfinite(total) || !std::isfinite(parts.distance) || !std::isfinite(parts.dice)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << e << " step " << s << " (batch stream " << stream << ", seed " << cfg.seed
            << "): total=" << total << " dice=" << parts.dice << " dist=" << parts.distance;
        throw TrainingDiverged(msg.str());
      }
      model.parameters().zero_grad();
      parts.total.backward();
      opt.step(model.parameters(), lr);
      state.accumulate(parts.distance, parts.dice);
      sum_total += total;
      sum_dice += parts.dice;
      sum_dist += parts.distance;
    }
    const double steps = static_cast<double>(cfg.steps_per_epoch);
    row.loss_total = sum_total / steps;
    row.loss_dice = sum_dice / steps;
    row.loss_dist = sum_dist / steps;

    double vd = 0.0, vdist = 0.0;
    for (const auto& v : val_vols) {
      const auto inf = sliding_window_infer(model, v, cfg.overlap);
      vd += dice(confusion(inf.mask, v.mask));
      std::vector<float> gt(v.mask.begin(), v.mask.end());
      vdist += anatomy_aware_loss(inf.probability.data(), gt.data(), v.shape, v.spacing, cfg.beta, cfg.epsilon);
    }
    row.val_dice = val_vols.empty() ? 0.0 : vd / static_cast<double>(val_vols.size());
    row.val_dist = val_vols.empty() ? 0.0 : vdist / static_cast<double>(val_vols.size());

    log << row.epoch << ',' << row.lr << ',' << row.lambda << ',' << row.loss_total << ',' << row.loss_dice << ','
        << row.loss_dist << ',' << row.val_dice << '\n'
        << std::flush;
    vlog << row.epoch << ',' << row.val_dice << ',' << row.val_dist << '\n' << std::flush;
    result.log.push_back(row);
    if (progress)
      *progress << "epoch " << e << "  lr " << lr << "  lambda " << row.lambda << "  loss " << row.loss_total
                << "  dice " << row.loss_dice << "  dist " << row.loss_dist << "  val_dice " << row.val_dice
                << "  val_dist " << row.val_dist << std::endl;

    // only the adaptive compound weights its Dice term by lambda
    if (cfg.loss == LossVariant::dice_ama) {
      state = update_lambda(state);
    } else {
      state.distance_sum = state.dice_sum = 0.0;
      state.steps = 0;
    }
    if (row.val_dice > result.best_val_dice) {
      result.best_val_dice = row.val_dice;
      result.best_epoch = e;
      checkpoint(out / "checkpoint_best.ptck", e, lr);
    }
  }
  checkpoint(out / "checkpoint_final.ptck", cfg.epochs - 1, lr_schedule(cfg.epochs - 1, cfg.epochs, cfg.lr0));
  return result;
}

}  // namespace ptseg
