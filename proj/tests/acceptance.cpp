// Acceptance checks. `acceptance --criterion N` runs one check and prints a
// single "PASS|FAIL criterion N: ..." line; the exit status mirrors it.

#include "oracles.hpp"

#include "ptseg/data/phantom.hpp"
#include "ptseg/harness/checkpoint.hpp"
#include "ptseg/harness/gradcheck.hpp"
#include "ptseg/harness/schedule.hpp"
#include "ptseg/harness/train.hpp"
#include "ptseg/losses/losses.hpp"
#include "ptseg/metrics/metrics.hpp"
#include "ptseg/model/ptnet.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <sys/wait.h>

using namespace ptseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream s;
  s << std::setprecision(4) << x;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path work_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ptseg_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TrainConfig toy_profile() { return load_train_config(fs::path(PTSEG_SOURCE_DIR) / "configs" / "toy.json"); }

std::vector<double> random_grid(const Triple& sh, CounterRng& rng) {
  std::vector<double> v(static_cast<std::size_t>(prod(sh)), 0.0);
  const double density = rng.uniform();
  for (auto& x : v) x = rng.uniform() < density ? (rng.below(2) ? 1.0 : rng.uniform()) : 0.0;
  return v;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckOptions opt;
  opt.maps = 50;
  opt.zero_target_maps = 5;
  opt.zero_prediction_maps = 5;
  const auto cases = loss_gradcheck(opt);
  double worst = 0, worst_open = 0;
  std::string worst_label;
  for (const auto& c : cases) {
    if (c.max_rel_error > worst) worst = c.max_rel_error, worst_label = c.label;
    if (c.label.find("P=0") == std::string::npos) worst_open = std::max(worst_open, c.max_rel_error);
  }
  const double s = seconds_since(t0);
  return {worst < 1e-4 && s < 60.0,
          std::to_string(cases.size()) + " maps, max rel error " + fmt(worst) + " (" + worst_label +
              "), excluding P=0 maps " + fmt(worst_open) + ", " + fmt(s) + " s"};
}

Outcome centroid_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  CounterRng rng(2024);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const Triple sh{1 + static_cast<Index>(rng.below(8)), 1 + static_cast<Index>(rng.below(12)),
                    1 + static_cast<Index>(rng.below(12))};
    const auto I = random_grid(sh, rng);
    double z = 0, m[3] = {0, 0, 0};
    for (Index d = 0; d < sh[0]; ++d)
      for (Index h = 0; h < sh[1]; ++h)
        for (Index w = 0; w < sh[2]; ++w) {
          const double x = I[flat_index(sh, d, h, w)] + 1e-8;
          z += x;
          m[0] += d * x;
          m[1] += h * x;
          m[2] += w * x;
        }
    const auto c = activation_center(I.data(), sh, 1e-8);
    for (int a = 0; a < 3; ++a) worst = std::max(worst, std::abs(c.coords[a] - m[a] / z));
  }
  bool midpoint = true;
  for (const Triple sh : {Triple{4, 7, 10}, Triple{1, 1, 1}, Triple{8, 320, 320}, Triple{5, 2, 9}}) {
    std::vector<double> zero(static_cast<std::size_t>(prod(sh)), 0.0);
    const auto c = activation_center(zero.data(), sh, 1e-8);
    for (int a = 0; a < 3; ++a) midpoint = midpoint && c.coords[a] == 0.5 * static_cast<double>(sh[a] - 1);
  }
  const double s = seconds_since(t0);
  return {worst < 1e-10 && midpoint && s < 60.0, "1000 masks, max |error| " + fmt(worst) +
                                                     (midpoint ? ", zero input at exact midpoint" : ", midpoint WRONG") +
                                                     ", " + fmt(s) + " s"};
}

Outcome loss_hand_values() {
  const Triple sh{8, 32, 16};
  const Spacing sp{4.0, 0.4, 0.4};
  auto box = [&](Index h0) {
    std::vector<double> v(static_cast<std::size_t>(prod(sh)), 0.0);
    for (Index d = 3; d < 6; ++d)
      for (Index h = h0; h < h0 + 3; ++h)
        for (Index w = 6; w < 9; ++w) v[flat_index(sh, d, h, w)] = 1.0;
    return v;
  };
  const auto G = box(7);
  auto ama = [&](const std::vector<double>& P) { return anatomy_aware_loss(P.data(), G.data(), sh, sp, 1.5, 1e-8); };
  const double expected = std::pow(4.0, 1.5) * 0.4;
  const double got = ama(box(11));
  const double same = ama(G);
  const double l2 = ama(box(9)), l4 = ama(box(11)), l8 = ama(box(15));
  const bool ok = std::abs(got - expected) < 1e-3 && same == 0.0 && l2 < l4 && l4 < l8;
  return {ok, "4-voxel shift " + fmt(got) + " vs " + fmt(expected) + ", P=G " + fmt(same) + ", gaps 2/4/8 -> " +
                  fmt(l2) + " < " + fmt(l4) + " < " + fmt(l8)};
}

Outcome wf_msa_reduction() {
  CounterRng rng(77);
  double worst = 0, row_err = 0;
  bool masked_zero = true;
  Index masked = 0;
  for (int t = 0; t < 20; ++t) {
    const Index heads = 1 + static_cast<Index>(rng.below(2));
    const Index c = heads * (2 + static_cast<Index>(rng.below(3)));
    const Triple win{1 + static_cast<Index>(rng.below(2)), 2 + static_cast<Index>(rng.below(2)),
                     2 + static_cast<Index>(rng.below(2))};
    const Triple grid{1 + static_cast<Index>(rng.below(2)), 1 + static_cast<Index>(rng.below(3)),
                      1 + static_cast<Index>(rng.below(3))};
    ParameterStore<double> store;
    AttentionParams<double> p(store, "attn", c, heads, win, rng);
    for (auto* l : {&p.query, &p.key, &p.value, &p.out}) {
      for (Index i = 0; i < l->weight.value().size(); ++i) l->weight.mutable_value()[i] = rng.uniform(-0.5, 0.5);
      for (Index i = 0; i < l->bias.value().size(); ++i) l->bias.mutable_value()[i] = rng.uniform(-0.1, 0.1);
    }
    for (Index i = 0; i < p.bias_table.value().size(); ++i) p.bias_table.mutable_value()[i] = rng.uniform(-1, 1);
    Tensor<double> xt(Shape{1, c, win[0] * grid[0], win[1] * grid[1], win[2] * grid[2]});
    for (Index i = 0; i < xt.size(); ++i) xt[i] = rng.uniform(-2, 2);
    Var<double> x(xt);
    const auto y = wf_msa(x, x, p).value();
    worst = std::max(worst, (y.array() - test::brute_force_window_msa(xt, p).array()).abs().maxCoeff());

    // shifted (and padded) variant for rows and mask
    const Triple dims{win[0] * grid[0] + 1, win[1] * grid[1] + 1, win[2] * grid[2] + 1};
    Tensor<double> zt(Shape{1, c, dims[0], dims[1], dims[2]});
    for (Index i = 0; i < zt.size(); ++i) zt[i] = rng.uniform(-2, 2);
    Var<double> z(zt);
    const Triple shift{win[0] / 2, win[1] / 2, win[2] / 2};
    const auto geo = WindowGeometry::make(dims, win, shift);
    AttentionProbe<double> probe;
    wf_msa(z, z, p, shift, &probe);
    for (std::size_t k = 0; k < probe.weights.size(); ++k) {
      const Index w = static_cast<Index>(k) / heads % geo.windows;  // (sample, window, head) order
      const auto& a = probe.weights[k];
      for (Index i = 0; i < geo.tokens; ++i) {
        if (geo.token_index[w * geo.tokens + i] < 0) continue;
        row_err = std::max(row_err, std::abs(a.row(i).sum() - 1.0));
        for (Index j = 0; j < geo.tokens; ++j)
          if (!geo.allowed(w, i, j)) {
            ++masked;
            masked_zero = masked_zero && a(i, j) == 0.0;
          }
      }
    }
  }
  return {worst <= 1e-6 && row_err <= 1e-6 && masked_zero && masked > 0,
          "20 draws, max |wf_msa(X,X) - MSA(X)| " + fmt(worst) + ", max |row sum - 1| " + fmt(row_err) + ", " +
              std::to_string(masked) + " masked entries " + (masked_zero ? "all exactly 0" : "NOT all 0")};
}

Outcome shape_algebra() {
  std::vector<std::string> problems;
  {
    const auto paper = ModelConfig::paper();
    ParameterStore<float> store;
    CounterRng rng(1);
    Embedding<float> embed(store, "embed", paper.base_channels, paper.patch_size, paper.embed_strides, rng);
    Var<float> x(Tensor<float>(Shape{1, 1, 8, 320, 320}, 0.5f));
    const auto y = embed(x);
    if (y.shape() != Shape{1, 48, 4, 80, 80}) problems.push_back("paper embedding gives " + to_string(y.shape()));
  }
  {
    const auto toy = ModelConfig::toy();
    PTNet<float> net(toy, 42);
    Tensor<float> x(Shape{1, 3, 8, 32, 32}, 0.1f);
    const auto y = net.forward(x);
    if (y.shape() != Shape{1, 2, 8, 32, 32}) problems.push_back("toy logits " + to_string(y.shape()));
  }
  CounterRng rng(55);
  int checked = 0;
  while (checked < 10) {
    ModelConfig c = ModelConfig::toy();
    c.n_modalities = 1 + static_cast<int>(rng.below(3));
    c.base_channels = 2 * (1 + static_cast<Index>(rng.below(3)));
    c.n_stages = 1 + static_cast<int>(rng.below(4));
    c.heads_per_stage.clear();
    c.window_size_per_stage.clear();
    c.merge_schedule.clear();
    for (int s = 0; s < c.n_stages; ++s) {
      c.heads_per_stage.push_back(Index{1} << rng.below(2));
      c.window_size_per_stage.push_back({1 + static_cast<Index>(rng.below(2)), 2 + static_cast<Index>(rng.below(3)),
                                         2 + static_cast<Index>(rng.below(3))});
      c.merge_schedule.push_back(rng.below(2) ? Triple{1, 2, 2} : Triple{2, 2, 2});
    }
    c.patch_size = {4 * (1 + static_cast<Index>(rng.below(2))), 8 * (2 + static_cast<Index>(rng.below(3))),
                    8 * (2 + static_cast<Index>(rng.below(3)))};
    c.se_reduction = 2;
    ShapePlan plan;
    try {
      c.validate();
      plan = plan_shapes(c);
    } catch (const std::exception&) {
      continue;  // draw again: only valid configs count
    }
    // closed form: embedding divides by the stride product, each stage by its merge factor (rounded up)
    Triple dims{};
    for (int a = 0; a < 3; ++a) dims[a] = c.patch_size[a] / (c.embed_strides[0][a] * c.embed_strides[1][a]);
    Index ch = 2 * c.base_channels;
    PTNet<float> net(c, 3);
    const auto enc = net.encode(PTNet<float>::split_modalities(
        Tensor<float>(Shape{1, c.n_modalities, c.patch_size[0], c.patch_size[1], c.patch_size[2]}, 0.2f)));
    for (int s = 0; s < c.n_stages; ++s) {
      const Shape want{1, ch, dims[0], dims[1], dims[2]};
      const Shape planned{1, plan.stages[s].channels, plan.stages[s].dims[0], plan.stages[s].dims[1], plan.stages[s].dims[2]};
      for (int m = 0; m < c.n_modalities; ++m)
        if (enc.skips[m][s].shape() != want || planned != want)
          problems.push_back("stage " + std::to_string(s) + ": " + to_string(enc.skips[m][s].shape()) + " vs " + to_string(want));
      for (int a = 0; a < 3; ++a) dims[a] = (dims[a] + c.merge_schedule[s][a] - 1) / c.merge_schedule[s][a];  // odd sizes are padded
      ch *= 2;
    }
    ++checked;
  }
  return {problems.empty(), problems.empty() ? "paper embedding 1x8x320x320 -> 48x4x80x80, toy logits 2x8x32x32, 10 random "
                                               "configs match the calculator"
                                             : problems.front()};
}

Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  CounterRng rng(606);
  double worst = 0;
  bool overlap_exact = true;
  for (int t = 0; t < 100; ++t) {
    const Triple sh{1 + static_cast<Index>(rng.below(16)), 1 + static_cast<Index>(rng.below(16)),
                    1 + static_cast<Index>(rng.below(16))};
    const Spacing sp{rng.uniform(0.3, 5), rng.uniform(0.3, 5), rng.uniform(0.3, 5)};
    const std::size_t n = static_cast<std::size_t>(prod(sh));
    Mask a(n), b(n);
    const double da = rng.uniform(0.05, 0.6), db = rng.uniform(0.05, 0.6);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform() < da;
      b[i] = rng.uniform() < db;
    }
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += a[i] && b[i];
      fp += a[i] && !b[i];
      fn += !a[i] && b[i];
    }
    const auto m = evaluate_case("x", a, b, sh, sp);
    if (tp + fp > 0 && tp + fn > 0)
      overlap_exact = overlap_exact && m.precision == static_cast<double>(tp) / static_cast<double>(tp + fp) &&
                      m.recall == static_cast<double>(tp) / static_cast<double>(tp + fn) &&
                      m.dice == 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    auto surface = [&](const Mask& mk) {
      std::vector<std::array<Index, 3>> s;
      for (Index d = 0; d < sh[0]; ++d)
        for (Index h = 0; h < sh[1]; ++h)
          for (Index w = 0; w < sh[2]; ++w) {
            if (!mk[flat_index(sh, d, h, w)]) continue;
            auto bg = [&](Index dd, Index hh, Index ww) {
              return dd < 0 || hh < 0 || ww < 0 || dd >= sh[0] || hh >= sh[1] || ww >= sh[2] || !mk[flat_index(sh, dd, hh, ww)];
            };
            if (bg(d - 1, h, w) || bg(d + 1, h, w) || bg(d, h - 1, w) || bg(d, h + 1, w) || bg(d, h, w - 1) || bg(d, h, w + 1))
              s.push_back({d, h, w});
          }
      return s;
    };
    const auto sa = surface(a), sb = surface(b);
    if (sa.empty() || sb.empty()) continue;
    auto directed = [&](const auto& from, const auto& to) {
      std::vector<double> out;
      for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
          double s2 = 0;
          for (int ax = 0; ax < 3; ++ax) s2 += std::pow((p[ax] - q[ax]) * sp[ax], 2);
          best = std::min(best, s2);
        }
        out.push_back(std::sqrt(best));
      }
      return out;
    };
    const auto ab = directed(sa, sb), ba = directed(sb, sa);
    std::vector<double> pooled = ab;
    pooled.insert(pooled.end(), ba.begin(), ba.end());
    std::sort(pooled.begin(), pooled.end());
    const double pos = 0.95 * static_cast<double>(pooled.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double hd95 = lo + 1 < pooled.size() ? pooled[lo] + (pos - lo) * (pooled[lo + 1] - pooled[lo]) : pooled.back();
    double asd = 0;
    for (double d : ab) asd += d;
    asd /= static_cast<double>(ab.size());
    worst = std::max({worst, std::abs(m.hd95_mm - hd95), std::abs(m.asd_mm - asd)});
  }
  const Triple sh{4, 8, 8};
  Mask p1(256, 0), g1(256, 0);
  p1[flat_index(sh, 2, 1, 4)] = 1;
  g1[flat_index(sh, 2, 4, 4)] = 1;
  const auto single = surface_distances(p1, g1, sh, {4.0, 0.4, 0.4});
  const bool single_ok = std::abs(single.hd95 - 1.2) < 1e-9 && std::abs(single.asd - 1.2) < 1e-9;
  const double s = seconds_since(t0);
  return {overlap_exact && worst < 1e-6 && single_ok && s < 120.0,
          std::string("overlap metrics ") + (overlap_exact ? "exact" : "MISMATCH") + ", max distance error " + fmt(worst) +
              ", single-voxel case hd95 " + fmt(single.hd95) + " asd " + fmt(single.asd) + " mm, " + fmt(s) + " s"};
}

Outcome lambda_schedule() {
  auto cfg = toy_profile();
  cfg.epochs = 3;
  cfg.out = work_dir("lambda").string();
  const auto cases = generate_set(cfg.phantoms);
  train(cfg, cases, &std::cerr);
  const auto rows = read_train_log(fs::path(cfg.out) / "train_log.csv");
  double worst = 0;
  bool lr_exact = rows.size() == 3;
  for (std::size_t e = 0; e < rows.size(); ++e) {
    lr_exact = lr_exact && rows[e].lr == cfg.lr0 * std::pow(1.0 - static_cast<double>(e) / 3.0, 0.9);
    if (e > 0) worst = std::max(worst, std::abs(rows[e].lambda - rows[e - 1].loss_dist / rows[e - 1].loss_dice));
  }
  return {rows.size() == 3 && worst < 1e-6 && lr_exact,
          "max |lambda(e+1) - dist(e)/dice(e)| " + fmt(worst) + ", LR column " + (lr_exact ? "exact" : "WRONG")};
}

Outcome learning_surrogate() {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = toy_profile();
  cfg.out = work_dir("toy").string();
  const auto cases = generate_set(cfg.phantoms);
  const auto r = train(cfg, cases, &std::cerr);
  const auto& first = r.log.front();
  const auto& last = r.log.back();
  const double drop = 1.0 - last.val_dist / first.val_dist;
  const bool split = r.train_ids.size() == 32 && r.val_ids.size() == 8;
  return {split && r.log.size() == 10 && last.val_dice >= 0.60 && drop >= 0.5,
          std::to_string(r.train_ids.size()) + "/" + std::to_string(r.val_ids.size()) + " split, final val Dice " +
              fmt(last.val_dice) + " (best " + fmt(r.best_val_dice) + "), val distance loss " + fmt(first.val_dist) +
              " -> " + fmt(last.val_dist) + " (" + fmt(100 * drop) + "% drop), " + fmt(seconds_since(t0)) + " s"};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PTSEG_CLI) + " " + args + " 1>&2";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome modality_ablation() {
  const auto dir = work_dir("ablation");
  const std::string config = (fs::path(PTSEG_SOURCE_DIR) / "configs" / "toy.json").string();
  if (run_cli("generate --config " + config + " --out " + (dir / "data").string()) != 0) return {false, "generate failed"};
  std::vector<std::string> notes;
  for (int m : {1, 2}) {
    const auto out = dir / ("m" + std::to_string(m));
    const int code = run_cli("train --config " + config + " --data " + (dir / "data").string() + " --out " + out.string() +
                             " --modalities " + std::to_string(m));
    if (code != 0) return {false, "--modalities " + std::to_string(m) + " exited " + std::to_string(code)};
    const auto ck = read_checkpoint(out / "checkpoint_final.ptck");
    if (ck.config.n_modalities != m) return {false, "checkpoint records " + std::to_string(ck.config.n_modalities) + " modalities"};
    PTNet<float> net(ck.config, 0);
    load_parameters(ck, ck.config, net.parameters());
    const auto plan = plan_shapes(ck.config);
    const auto& p = ck.config.patch_size;
    const auto enc = net.encode(PTNet<float>::split_modalities(Tensor<float>(Shape{1, m, p[0], p[1], p[2]}, 0.3f)));
    if (static_cast<int>(enc.bottlenecks.size()) != m) return {false, "branch count differs"};
    for (int s = 0; s < ck.config.n_stages; ++s) {
      const auto& st = plan.stages[s];
      for (int k = 0; k < m; ++k)
        if (enc.skips[k][s].shape() != Shape{1, st.channels, st.dims[0], st.dims[1], st.dims[2]})
          return {false, "stage shape mismatch with " + std::to_string(m) + " modalities"};
    }
    const auto logits = net.forward(Tensor<float>(Shape{1, m, p[0], p[1], p[2]}, 0.3f));
    if (logits.shape() != Shape{1, 2, p[0], p[1], p[2]}) return {false, "logit shape " + to_string(logits.shape())};
    const auto rows = read_train_log(out / "train_log.csv");
    notes.push_back(std::to_string(m) + " modality: " + std::to_string(rows.size()) + " epochs, final val Dice " +
                    fmt(rows.back().val_dice));
  }
  return {true, notes[0] + "; " + notes[1] + "; shapes match the calculator"};
}

Outcome determinism() {
  auto cfg = toy_profile();
  const auto cases = generate_set(cfg.phantoms);
  const auto a = work_dir("det_a"), b = work_dir("det_b");
  cfg.out = a.string();
  train(cfg, cases, &std::cerr);
  cfg.out = b.string();
  train(cfg, cases, &std::cerr);
  std::vector<std::string> differ;
  for (const char* f : {"train_log.csv", "val_log.csv", "checkpoint_best.ptck", "checkpoint_final.ptck"})
    if (slurp(a / f) != slurp(b / f) || slurp(a / f).empty()) differ.push_back(f);
  return {differ.empty(), differ.empty() ? "train/val logs and both checkpoints byte-identical across two runs"
                                         : "differs: " + differ.front()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ptseg acceptance checks"};
  int criterion = 0;
  app.add_option("--criterion", criterion, "criterion number (1-10)")->required()->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::map<int, std::function<Outcome()>> checks{
      {1, gradient_fidelity}, {2, centroid_oracle},   {3, loss_hand_values},   {4, wf_msa_reduction},
      {5, shape_algebra},     {6, metric_oracles},    {7, lambda_schedule},    {8, learning_surrogate},
      {9, modality_ablation}, {10, determinism}};
  Outcome r;
  try {
    r = checks.at(criterion)();
  } catch (const std::exception& e) {
    r = {false, std::string("exception: ") + e.what()};
  }
  std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << criterion << ": " << r.detail << std::endl;
  return r.pass ? 0 : 1;
}
