#include "oracles.hpp"
#include "support.hpp"

#include "ptseg/losses/losses.hpp"
#include "ptseg/model/ptnet.hpp"

#include <doctest.h>

#include <numeric>

using namespace ptseg;
using test::random_tensor;

namespace {

AttentionParams<double> random_attention(ParameterStore<double>& store, Index c, Index heads, const Triple& window,
                                         CounterRng& rng, bool random_bias) {
  AttentionParams<double> p(store, "attn", c, heads, window, rng);
  for (auto* l : {&p.query, &p.key, &p.value, &p.out}) {
    l->weight.mutable_value() = random_tensor(l->weight.shape(), rng, -0.5, 0.5);
    l->bias.mutable_value() = random_tensor(l->bias.shape(), rng, -0.1, 0.1);
  }
  if (random_bias) p.bias_table.mutable_value() = random_tensor(p.bias_table.shape(), rng, -1, 1);
  return p;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) { return (a.array() - b.array()).abs().maxCoeff(); }

template <typename S>
void zero(Var<S>& v) {
  v.mutable_value().array().setZero();
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("window geometry counts and partition round trip") {
  const auto g = WindowGeometry::make({4, 8, 8}, {2, 4, 4}, {0, 0, 0});
  CHECK(g.windows == 8);
  CHECK(g.tokens == 32);
  CHECK(g.bias_table_size() == 3 * 7 * 7);
  CounterRng rng(1);
  for (const Triple dims : {Triple{4, 8, 8}, Triple{3, 5, 7}, Triple{1, 6, 2}}) {
    const auto x = random_tensor({2, 3, dims[0], dims[1], dims[2]}, rng);
    for (const Triple shift : {Triple{0, 0, 0}, Triple{1, 2, 2}, Triple{1, 1, 3}}) {
      const auto geo = WindowGeometry::make(dims, {2, 4, 4}, shift);
      CHECK(max_abs_diff(window_reverse(window_partition(x, geo), geo), x) == 0.0);
    }
  }
}

TEST_CASE("fusion attention of a map with itself is windowed self-attention") {
  CounterRng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    ParameterStore<double> store;
    const auto p = random_attention(store, 8, 2, {2, 4, 4}, rng, true);
    Var<double> x(random_tensor({1, 8, 4, 8, 8}, rng));
    const auto y = wf_msa(x, x, p).value();
    CHECK(max_abs_diff(y, test::brute_force_window_msa(x.value(), p)) < 1e-10);
  }
}

TEST_CASE("attention rows are distributions and masked entries are exactly zero") {
  CounterRng rng(3);
  ParameterStore<double> store;
  const auto p = random_attention(store, 4, 2, {2, 4, 4}, rng, true);
  // 3x6x6 forces padding and a shift along every axis
  Var<double> x(random_tensor({1, 4, 3, 6, 6}, rng));
  const auto geo = WindowGeometry::make({3, 6, 6}, {2, 4, 4}, {1, 2, 2});
  AttentionProbe<double> probe;
  wf_msa(x, x, p, {1, 2, 2}, &probe);
  REQUIRE(probe.weights.size() == static_cast<std::size_t>(geo.windows * 2));
  Index masked = 0;
  for (std::size_t k = 0; k < probe.weights.size(); ++k) {
    const Index w = static_cast<Index>(k) / 2;
    const auto& a = probe.weights[k];
    for (Index i = 0; i < geo.tokens; ++i) {
      if (geo.token_index[w * geo.tokens + i] < 0) continue;
      CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-12);
      for (Index j = 0; j < geo.tokens; ++j)
        if (!geo.allowed(w, i, j)) {
          CHECK(a(i, j) == 0.0);
          ++masked;
        }
    }
  }
  CHECK(masked > 0);
}

TEST_CASE("keys and values are permutation equivariant without bias") {
  CounterRng rng(4);
  ParameterStore<double> store;
  const auto p = random_attention(store, 4, 2, {2, 2, 3}, rng, false);
  Var<double> major(random_tensor({1, 4, 2, 2, 3}, rng));
  const auto minor = random_tensor({1, 4, 2, 2, 3}, rng);
  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  for (Index i = 11; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor<double> shuffled(minor.shape());
  for (Index c = 0; c < 4; ++c)
    for (Index t = 0; t < 12; ++t) shuffled[c * 12 + t] = minor[c * 12 + perm[t]];
  const auto a = wf_msa(major, Var<double>(minor), p).value();
  const auto b = wf_msa(major, Var<double>(shuffled), p).value();
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("a window spanning the whole map makes shifting a no-op") {
  CounterRng rng(5);
  ParameterStore<double> store;
  const auto p = random_attention(store, 4, 1, {2, 4, 4}, rng, true);
  Var<double> x(random_tensor({1, 4, 2, 4, 4}, rng));
  CHECK(max_abs_diff(wf_msa(x, x, p, {1, 2, 2}).value(), wf_msa(x, x, p).value()) == 0.0);
}

}  // TEST_SUITE

TEST_SUITE("blocks") {

TEST_CASE("zeroed output projections make transformer blocks the identity") {
  CounterRng rng(6);
  ParameterStore<double> store;
  for (bool cross : {false, true}) {
    WindowBlock<double> b(store, cross ? "c" : "s", 8, 2, {2, 4, 4}, {1, 2, 2}, 4.0, cross, rng);
    zero(b.attn.out.weight);
    zero(b.attn.out.bias);
    zero(b.mlp.fc2.weight);
    zero(b.mlp.fc2.bias);
    Var<double> x(random_tensor({2, 8, 2, 8, 8}, rng)), m(random_tensor({2, 8, 2, 8, 8}, rng));
    const auto y = cross ? b(x, m) : b(x);
    CHECK(max_abs_diff(y.value(), x.value()) == 0.0);
  }
}

TEST_CASE("fusion block degenerates with fewer modalities") {
  CounterRng rng(7);
  ParameterStore<double> store;
  MultimodalFusionBlock<double> one(store, "m1", 1, 4, 1, {2, 2, 2}, 2.0, rng);
  MultimodalFusionBlock<double> two(store, "m2", 2, 4, 1, {2, 2, 2}, 2.0, rng);
  MultimodalFusionBlock<double> three(store, "m3", 3, 4, 1, {2, 2, 2}, 2.0, rng);
  CHECK(one.blocks.size() == 1);
  CHECK_FALSE(one.blocks[0].cross);
  CHECK(two.blocks.size() == 1);
  CHECK(two.blocks[0].cross);
  CHECK(three.blocks.size() == 3);
  Var<double> a(random_tensor({1, 4, 2, 2, 2}, rng)), b(random_tensor({1, 4, 2, 2, 2}, rng)), c(random_tensor({1, 4, 2, 2, 2}, rng));
  CHECK(max_abs_diff(one({a}).value(), one.blocks[0](a).value()) == 0.0);
  CHECK(max_abs_diff(two({a, b}).value(), two.blocks[0](a, b).value()) == 0.0);
  const auto x12 = three.blocks[0](a, b), x13 = three.blocks[1](a, c);
  CHECK(max_abs_diff(three({a, b, c}).value(), three.blocks[2](x12, x13).value()) == 0.0);
  CHECK(three({a, b, c}).shape() == a.shape());
  CHECK_THROWS(three({a, b}));
  CHECK_THROWS(MultimodalFusionBlock<double>(store, "m4", 4, 4, 1, {2, 2, 2}, 2.0, rng));
}

TEST_CASE("transformer blocks stay finite on large inputs") {
  CounterRng rng(8);
  ParameterStore<double> store;
  MultimodalFusionBlock<double> mfb(store, "mfb", 3, 8, 2, {2, 4, 4}, 2.0, rng);
  WindowBlock<double> swb(store, "swb", 8, 2, {2, 4, 4}, {1, 2, 2}, 2.0, false, rng);
  for (int t = 0; t < 5; ++t) {
    std::vector<Var<double>> in;
    for (int m = 0; m < 3; ++m) in.emplace_back(random_tensor({1, 8, 2, 8, 8}, rng, -10, 10));
    CHECK(swb(mfb(in)).value().array().isFinite().all());
  }
}

TEST_CASE("patch merging halves the map and doubles channels") {
  CounterRng rng(9);
  ParameterStore<float> store;
  PatchMerge<float> pm1(store, "pm1", 48, {4, 80, 80}, {1, 2, 2}, rng);
  PatchMerge<float> pm2(store, "pm2", 192, {4, 20, 20}, {2, 2, 2}, rng);
  CHECK(pm1(Var<float>(Tensor<float>(Shape{1, 48, 4, 80, 80}, 0.5f))).shape() == Shape{1, 96, 4, 40, 40});
  CHECK(pm2(Var<float>(Tensor<float>(Shape{1, 192, 4, 20, 20}, 0.5f))).shape() == Shape{1, 384, 2, 10, 10});
}

TEST_CASE("squeeze excitation gates") {
  CounterRng rng(10);
  ParameterStore<double> store;
  SqueezeExcitation<double> se(store, "se", 8, 4, rng);
  Var<double> x(random_tensor({2, 8, 2, 3, 3}, rng, -5, 5));
  const auto g = se.gates(x).value();
  CHECK((g.array() > 0.0).all());
  CHECK((g.array() < 1.0).all());
  zero(se.fc2.weight);
  zero(se.fc2.bias);
  CHECK((se.gates(x).value().array() == 0.5).all());
  CHECK(max_abs_diff(se(x).value(), Tensor<double>(x.shape(), x.value().array() * 0.5)) == 0.0);
  CHECK_THROWS(SqueezeExcitation<double>(store, "bad", 6, 4, rng));
}

TEST_CASE("information calibration upsamples and keeps a third of the channels") {
  CounterRng rng(11);
  ParameterStore<double> store;
  InformationCalibration<double> icm(store, "icm", 3 * 12, 3, {2, 2, 2}, {2, 10, 10}, 4, rng);
  Var<double> x(random_tensor({1, 36, 1, 5, 5}, rng, -3, 3));
  const auto y = icm(x);
  CHECK(y.shape() == Shape{1, 12, 2, 10, 10});
  CHECK(y.value().array().isFinite().all());
  CHECK_THROWS(InformationCalibration<double>(store, "bad", 35, 3, {2, 2, 2}, {2, 10, 10}, 4, rng));
}

}  // TEST_SUITE

TEST_SUITE("ptnet") {

TEST_CASE("shape plan of the full and toy configs") {
  const auto paper = plan_shapes(ModelConfig::paper());
  CHECK(paper.embed_mid == Triple{4, 160, 160});
  CHECK(paper.embed_mid_channels == 24);
  CHECK(paper.stages[0].channels == 48);
  CHECK(paper.stages[0].dims == Triple{4, 80, 80});
  CHECK(paper.stages[2].dims == Triple{4, 20, 20});
  CHECK(paper.stages[3].dims == Triple{2, 10, 10});
  const auto toy = plan_shapes(ModelConfig::toy());
  CHECK(toy.stages[0].channels == 16);
  CHECK(toy.stages[0].dims == Triple{4, 8, 8});
  CHECK(toy.bottleneck_channels == 256);
  CHECK(toy.bottleneck_dims == Triple{1, 1, 1});
  auto bad = ModelConfig::toy();
  bad.patch_size = {8, 30, 32};
  CHECK_THROWS_AS(plan_shapes(bad), ShapeError);
  bad = ModelConfig::toy();
  bad.heads_per_stage = {3, 8, 16, 32};
  CHECK_THROWS_AS(plan_shapes(bad), std::invalid_argument);
}

TEST_CASE("toy forward: logits at patch size, parameter budget, determinism") {
  const auto cfg = ModelConfig::toy();
  PTNet<float> a(cfg, 42), b(cfg, 42);
  CHECK(a.parameters().count() < 5'000'000);
  CounterRng rng(12);
  Tensor<float> x(Shape{2, 3, 8, 32, 32});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
  const auto ya = a.forward(x), yb = b.forward(x);
  CHECK(ya.shape() == Shape{2, 2, 8, 32, 32});
  CHECK((ya.value().array() == yb.value().array()).all());
  const auto enc = a.encode(PTNet<float>::split_modalities(x));
  CHECK(enc.bottlenecks[0].shape() == Shape{2, 256, 1, 1, 1});
  CHECK(enc.skips[1].size() == 4);
  CHECK_THROWS_AS(a.forward(Tensor<float>(Shape{1, 3, 8, 32, 16})), ShapeError);
}

TEST_CASE("every parameter receives gradient") {
  const auto cfg = ModelConfig::toy();
  PTNet<float> model(cfg, 3);
  CounterRng rng(13);
  Tensor<float> x(Shape{2, 3, 8, 32, 32}), y(Shape{2, 1, 8, 32, 32});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
  for (Index n = 0; n < 2; ++n)
    for (Index d = 2; d < 6; ++d)
      for (Index h = 8; h < 20; ++h)
        for (Index w = 10; w < 24; ++w) y.at(n, 0, d, h, w) = 1.0f;
  LossState st;
  model.parameters().zero_grad();
  losses::compound_loss(model.forward(x), y, {4.0, 0.4, 0.4}, st, LossVariant::dice_ama).total.backward();
  // zero-initialised bias tables get gradient only through their entry
  for (const auto& [name, v] : model.parameters().entries()) {
    INFO(name);
    CHECK((v.grad().array() != 0.0f).any());
  }
}

TEST_CASE("stage shapes follow the calculator for random configs") {
  CounterRng rng(14);
  for (int t = 0; t < 6; ++t) {
    ModelConfig c = ModelConfig::toy();
    c.n_modalities = 1 + static_cast<int>(rng.below(3));
    c.base_channels = 2 * (1 + static_cast<Index>(rng.below(2)));
    c.n_stages = 2 + static_cast<int>(rng.below(3));
    c.heads_per_stage.assign(c.n_stages, 1);
    c.window_size_per_stage.clear();
    c.merge_schedule.clear();
    for (int s = 0; s < c.n_stages; ++s) {
      c.heads_per_stage[s] = Index{1} << rng.below(2);
      c.window_size_per_stage.push_back({1 + static_cast<Index>(rng.below(2)), 2 + static_cast<Index>(rng.below(3)),
                                         2 + static_cast<Index>(rng.below(3))});
      c.merge_schedule.push_back(rng.below(2) ? Triple{1, 2, 2} : Triple{2, 2, 2});
    }
    c.patch_size = {2 * (2 + static_cast<Index>(rng.below(2))), 4 * (3 + static_cast<Index>(rng.below(3))),
                    4 * (3 + static_cast<Index>(rng.below(3)))};
    c.se_reduction = 2;
    const auto plan = plan_shapes(c);
    PTNet<float> net(c, 1);
    Tensor<float> x(Shape{1, c.n_modalities, c.patch_size[0], c.patch_size[1], c.patch_size[2]}, 0.25f);
    const auto enc = net.encode(PTNet<float>::split_modalities(x));
    for (int m = 0; m < c.n_modalities; ++m) {
      for (int s = 0; s < c.n_stages; ++s) {
        const auto& st = plan.stages[s];
        CHECK(enc.skips[m][s].shape() == Shape{1, st.channels, st.dims[0], st.dims[1], st.dims[2]});
      }
      const auto& bd = plan.bottleneck_dims;
      CHECK(enc.bottlenecks[m].shape() == Shape{1, plan.bottleneck_channels, bd[0], bd[1], bd[2]});
    }
    CHECK(net.decode(enc).shape() == Shape{1, 2, c.patch_size[0], c.patch_size[1], c.patch_size[2]});
  }
}

TEST_CASE("rotating modalities with their branches rotates the encoder outputs") {
  auto cfg = ModelConfig::toy();
  cfg.patch_size = {4, 16, 16};
  PTNet<float> a(cfg, 5), b(cfg, 6);
  for (auto& [name, v] : b.parameters().entries()) {
    const int m = name[3] - '0';  // "enc<m>..." gets branch m-1 of a
    if (name.rfind("enc", 0) != 0) continue;
    v.mutable_value() = a.parameters().get("enc" + std::to_string((m + 2) % 3) + name.substr(4)).value();
  }
  CounterRng rng(15);
  std::vector<Var<float>> x, rotated(3);
  for (int m = 0; m < 3; ++m) {
    Tensor<float> t(Shape{1, 1, 4, 16, 16});
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
    x.emplace_back(std::move(t));
  }
  for (int m = 0; m < 3; ++m) rotated[(m + 1) % 3] = x[m];
  const auto ea = a.encode(x), eb = b.encode(rotated);
  for (int m = 0; m < 3; ++m)
    CHECK((ea.bottlenecks[m].value().array() == eb.bottlenecks[(m + 1) % 3].value().array()).all());
}

}  // TEST_SUITE
