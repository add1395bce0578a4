// ptseg — generate phantoms, train, infer, evaluate and gradient-check.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include "ptseg/data/phantom.hpp"
#include "ptseg/harness/checkpoint.hpp"
#include "ptseg/harness/gradcheck.hpp"
#include "ptseg/harness/inference.hpp"
#include "ptseg/harness/train.hpp"
#include "ptseg/metrics/metrics.hpp"

#include <CLI11.hpp>

#include <bit>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

namespace fs = std::filesystem;
using namespace ptseg;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Triple to_triple(const std::vector<long>& v) { return {v.at(0), v.at(1), v.at(2)}; }
Spacing to_spacing(const std::vector<double>& v) { return {v.at(0), v.at(1), v.at(2)}; }

void write_prediction(const fs::path& dir, const MultimodalVolume& src, const InferenceResult& r) {
  MultimodalVolume pred;
  pred.case_id = src.case_id;
  pred.shape = src.shape;
  pred.spacing = src.spacing;
  pred.mask = r.mask;
  save_volume(pred, dir);
  std::ofstream out(dir / "prob.raw", std::ios::binary);
  for (float p : r.probability) {
    const auto u = std::bit_cast<std::uint32_t>(p);
    for (int b = 0; b < 4; ++b) out.put(static_cast<char>((u >> (8 * b)) & 0xFF));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ptseg: multimodal 3D tumor segmentation with an anatomy-aware loss"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write synthetic multimodal phantom cases");
  std::string gen_out, gen_config;
  int gen_count = 0, gen_distractors = -1;
  std::uint64_t gen_seed = 0;
  std::vector<long> gen_size;
  std::vector<double> gen_spacing, gen_cc;
  double gen_noise = -1;
  gen->add_option("--out", gen_out, "output root; one directory per case")->required();
  gen->add_option("--config", gen_config, "training config whose 'phantoms' section supplies defaults");
  auto* o_count = gen->add_option("--count", gen_count, "number of cases")->check(CLI::PositiveNumber);
  auto* o_gseed = gen->add_option("--seed", gen_seed, "set seed");
  gen->add_option("--size", gen_size, "D,H,W")->delimiter(',')->expected(3);
  gen->add_option("--spacing", gen_spacing, "mm per voxel along D,H,W")->delimiter(',')->expected(3);
  gen->add_option("--tumor-cc", gen_cc, "tumor volume range lo,hi in cc")->delimiter(',')->expected(2);
  gen->add_option("--distractors", gen_distractors, "vessel/muscle distractors per case")->check(CLI::NonNegativeNumber);
  gen->add_option("--noise-scale", gen_noise, "multiplier on tissue noise sd")->check(CLI::NonNegativeNumber);

  // train
  auto* tr = app.add_subcommand("train", "train on a case directory");
  std::string tr_config, tr_data, tr_out, tr_loss;
  std::optional<double> tr_beta, tr_eps, tr_lr0, tr_momentum;
  std::optional<int> tr_epochs, tr_steps, tr_batch, tr_folds, tr_fold, tr_modalities;
  std::optional<std::uint64_t> tr_seed;
  std::vector<long> tr_patch, tr_window;
  tr->add_option("--config", tr_config, "JSON training config; flags override its values");
  tr->add_option("--data", tr_data, "case root directory");
  tr->add_option("--out", tr_out, "output directory for logs and checkpoints");
  tr->add_option("--loss", tr_loss, "loss variant")->check(CLI::IsMember({"ce", "dice", "dice+ce", "dice+ama"}));
  tr->add_option("--beta", tr_beta, "distance penalty factor");
  tr->add_option("--epsilon", tr_eps, "centroid stability constant");
  tr->add_option("--epochs", tr_epochs, "epochs");
  tr->add_option("--steps", tr_steps, "steps per epoch");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--lr0", tr_lr0, "initial learning rate");
  tr->add_option("--momentum", tr_momentum, "Nesterov momentum");
  tr->add_option("--folds", tr_folds, "number of folds K");
  tr->add_option("--fold", tr_fold, "fold index I (validation fold)");
  tr->add_option("--seed", tr_seed, "seed for model init, split and sampling");
  tr->add_option("--patch", tr_patch, "patch size D,H,W")->delimiter(',')->expected(3);
  tr->add_option("--modalities", tr_modalities, "modalities used (1..3)")->check(CLI::Range(1, 3));
  tr->add_option("--window", tr_window, "attention window d,h,w for every stage")->delimiter(',')->expected(3);

  // infer
  auto* inf = app.add_subcommand("infer", "sliding-window inference over a case directory");
  std::string inf_ck, inf_data, inf_out;
  double inf_overlap = 0.5;
  inf->add_option("--checkpoint", inf_ck, "checkpoint file")->required();
  inf->add_option("--data", inf_data, "case root directory")->required();
  inf->add_option("--out", inf_out, "prediction root directory")->required();
  inf->add_option("--overlap", inf_overlap, "tile overlap fraction")->check(CLI::Range(0.0, 0.95));

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "metrics of predictions against ground truth");
  std::string ev_pred, ev_gt;
  bool ev_meta_spacing = true;
  std::vector<double> ev_spacing, ev_groups{4.0, 10.0};
  std::vector<std::string> ev_report;
  ev->add_option("--pred", ev_pred, "prediction root")->required();
  ev->add_option("--gt", ev_gt, "ground-truth root")->required();
  ev->add_flag("--spacing-from-meta,!--no-spacing-from-meta", ev_meta_spacing, "take spacing from ground-truth meta.json (default)");
  ev->add_option("--spacing", ev_spacing, "explicit spacing a,b,c (implies --no-spacing-from-meta)")->delimiter(',')->expected(3);
  ev->add_option("--groups", ev_groups, "volume group thresholds lo,hi in cc")->delimiter(',')->expected(2);
  ev->add_option("--report", ev_report, "out.csv,out.json")->delimiter(',')->expected(2)->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of the loss and the network");
  std::uint64_t gc_seed = 1;
  int gc_maps = 50, gc_params = 24;
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--maps", gc_maps, "random probability maps")->check(CLI::PositiveNumber);
  gc->add_option("--params", gc_params, "random network parameters")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (gen->parsed()) {
      TrainConfig base;
      if (!gen_config.empty()) base = load_train_config(gen_config);
      PhantomSet set = base.phantoms;
      if (o_count->count()) set.count = gen_count;
      if (o_gseed->count()) set.seed = gen_seed;
      if (!gen_size.empty()) set.base.shape = to_triple(gen_size);
      if (!gen_spacing.empty()) set.base.spacing = to_spacing(gen_spacing);
      if (!gen_cc.empty()) {
        set.base.tumor_cc_lo = gen_cc[0];
        set.base.tumor_cc_hi = gen_cc[1];
      }
      if (gen_distractors >= 0) set.base.n_distractors = gen_distractors;
      if (gen_noise >= 0) set.base.noise_scale = gen_noise;
      try {
        set.base.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      for (int i = 0; i < set.count; ++i) {
        const auto v = generate_phantom(case_spec(set, i));
        save_volume(v, fs::path(gen_out) / v.case_id);
        std::cout << v.case_id << "  tumor " << v.tumor_volume_cc() << " cc\n";
      }
      return 0;
    }

    if (tr->parsed()) {
      TrainConfig cfg;
      if (!tr_config.empty()) cfg = load_train_config(tr_config);
      if (!tr_data.empty()) cfg.data = tr_data;
      if (!tr_out.empty()) cfg.out = tr_out;
      if (!tr_loss.empty()) cfg.loss = parse_loss_variant(tr_loss);
      if (tr_beta) cfg.beta = *tr_beta;
      if (tr_eps) cfg.epsilon = *tr_eps;
      if (tr_epochs) cfg.epochs = *tr_epochs;
      if (tr_steps) cfg.steps_per_epoch = *tr_steps;
      if (tr_batch) cfg.batch_size = *tr_batch;
      if (tr_lr0) cfg.lr0 = *tr_lr0;
      if (tr_momentum) cfg.momentum = *tr_momentum;
      if (tr_folds) cfg.folds = *tr_folds;
      if (tr_fold) cfg.fold = *tr_fold;
      if (tr_seed) cfg.seed = *tr_seed;
      if (tr_modalities) cfg.model.n_modalities = *tr_modalities;
      if (!tr_patch.empty()) cfg.model.patch_size = to_triple(tr_patch);
      if (!tr_window.empty())
        for (auto& w : cfg.model.window_size_per_stage) w = to_triple(tr_window);
      if (cfg.data.empty()) {
        std::cerr << "train: --data is required (directly or via --config)\n\n" << tr->help();
        return kUsageError;
      }
      try {
        cfg.validate();
        plan_shapes(cfg.model);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      const auto cases = load_dataset(cfg.data);
      const auto r = train(cfg, cases, &std::cout);
      std::cout << "best val dice " << r.best_val_dice << " at epoch " << r.best_epoch << "\n";
      return 0;
    }

    if (inf->parsed()) {
      const auto ck = read_checkpoint(inf_ck);
      PTNet<float> model(ck.config, 0);
      load_parameters(ck, ck.config, model.parameters());
      for (const auto& p : list_cases(inf_data)) {
        const auto v = load_volume(p);
        const auto r = sliding_window_infer(model, normalize(v), inf_overlap);
        write_prediction(fs::path(inf_out) / v.case_id, v, r);
        std::cout << v.case_id << "  foreground voxels " << std::count(r.mask.begin(), r.mask.end(), 1) << "\n";
      }
      return 0;
    }

    if (ev->parsed()) {
      const GroupThresholds groups{ev_groups[0], ev_groups[1]};
      if (!(groups.lo <= groups.hi)) throw UsageError("--groups must satisfy lo <= hi");
      std::vector<CaseMetrics> rows;
      for (const auto& p : list_cases(ev_gt)) {
        const auto gt = load_volume(p);
        const fs::path pp = fs::path(ev_pred) / p.filename();
        if (!fs::exists(pp / "meta.json")) throw DataError("no prediction for case " + gt.case_id + " under " + ev_pred);
        const auto pred = load_volume(pp);
        if (pred.shape != gt.shape) throw DataError(gt.case_id + ": prediction shape differs from ground truth");
        Spacing spacing = gt.spacing;
        if (!ev_spacing.empty()) spacing = to_spacing(ev_spacing);
        else if (!ev_meta_spacing) throw UsageError("--no-spacing-from-meta needs --spacing");
        rows.push_back(evaluate_case(gt.case_id, pred.mask, gt.mask, gt.shape, spacing, groups));
      }
      const auto report = build_report(rows);
      emit_report(report, ev_report[0], ev_report[1]);
      const auto& all = report.groups.at("overall");
      std::cout << "cases " << rows.size() << "  dice " << all.at("dice").mean << " ± " << all.at("dice").sd << "  hd95 "
                << all.at("hd95_mm").mean << " mm  asd " << all.at("asd_mm").mean << " mm\n";
      return 0;
    }

    if (gc->parsed()) {
      GradcheckOptions opt;
      opt.seed = gc_seed;
      opt.maps = gc_maps;
      opt.zero_target_maps = std::min(5, gc_maps);
      bool ok = true;
      double worst = 0.0;
      for (const auto& c : loss_gradcheck(opt)) worst = std::max(worst, c.max_rel_error);
      const bool loss_ok = worst < 1e-4;
      std::cout << (loss_ok ? "PASS" : "FAIL") << "  loss gradient, " << opt.maps << " maps, max rel error " << worst
                << " (< 1e-4)\n";
      ok = ok && loss_ok;
      worst = 0.0;
      std::string worst_label;
      for (const auto& c : model_gradcheck(gc_seed, gc_params))
        if (c.max_rel_error >= worst) {
          worst = c.max_rel_error;
          worst_label = c.label;
        }
      const bool model_ok = worst < 1e-3;
      std::cout << (model_ok ? "PASS" : "FAIL") << "  network gradient, " << gc_params << " parameters, max rel error "
                << worst << " (< 1e-3) at " << worst_label << "\n";
      ok = ok && model_ok;
      return ok ? 0 : kRuntimeFailure;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return 0;
}
