#include "ptseg/core/rng.hpp"
#include "ptseg/data/phantom.hpp"
#include "ptseg/data/sampling.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <queue>

using namespace ptseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ptseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int components6(const std::vector<std::uint8_t>& mask, const Triple& sh) {
  std::vector<int> seen(mask.size(), 0);
  int count = 0;
  for (Index s = 0; s < prod(sh); ++s) {
    if (!mask[s] || seen[s]) continue;
    ++count;
    std::queue<Index> q;
    q.push(s);
    seen[s] = 1;
    while (!q.empty()) {
      const Index i = q.front();
      q.pop();
      const Index d = i / (sh[1] * sh[2]), h = (i / sh[2]) % sh[1], w = i % sh[2];
      const Index nb[6][3] = {{d - 1, h, w}, {d + 1, h, w}, {d, h - 1, w}, {d, h + 1, w}, {d, h, w - 1}, {d, h, w + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= sh[0] || n[1] >= sh[1] || n[2] >= sh[2]) continue;
        const Index j = flat_index(sh, n[0], n[1], n[2]);
        if (mask[j] && !seen[j]) {
          seen[j] = 1;
          q.push(j);
        }
      }
    }
  }
  return count;
}

PhantomSpec small_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  s.case_id = "c" + std::to_string(seed);
  return s;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("tumor volume lands in the requested range") {
  auto s = small_spec(7);
  const auto v = generate_phantom(s);
  const double voxel_cc = 4.0 * 0.4 * 0.4 / 1000.0;
  Index n = 0;
  for (auto m : v.mask) n += m;
  const double cc = static_cast<double>(n) * voxel_cc;
  CHECK(cc >= 1.0);
  CHECK(cc <= 2.0);
  CHECK(v.tumor_volume_cc() == doctest::Approx(cc));
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const double c = generate_phantom(small_spec(seed)).tumor_volume_cc();
    CHECK(c >= 1.0);
    CHECK(c <= 2.0);
  }
}

TEST_CASE("one connected tumor with a one-voxel margin") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = small_spec(seed);
    s.n_distractors = seed % 2 ? 0 : 3;
    const auto v = generate_phantom(s);
    CHECK(components6(v.mask, v.shape) == 1);
    for (Index d = 0; d < v.shape[0]; ++d)
      for (Index h = 0; h < v.shape[1]; ++h)
        for (Index w = 0; w < v.shape[2]; ++w) {
          const bool face = d == 0 || h == 0 || w == 0 || d == v.shape[0] - 1 || h == v.shape[1] - 1 || w == v.shape[2] - 1;
          if (face) REQUIRE(v.mask[flat_index(v.shape, d, h, w)] == 0);
        }
  }
}

TEST_CASE("same spec and seed give byte-identical volumes") {
  const auto a = generate_phantom(small_spec(11)), b = generate_phantom(small_spec(11));
  REQUIRE(a.intensities.size() == b.intensities.size());
  CHECK(std::memcmp(a.intensities.data(), b.intensities.data(), sizeof(float) * a.intensities.size()) == 0);
  CHECK(a.mask == b.mask);
  const auto c = generate_phantom(small_spec(12));
  CHECK(c.mask != a.mask);
}

TEST_CASE("mask voxels carry tumor intensity without noise") {
  auto s = small_spec(13);
  s.noise_scale = 0.0;
  const auto v = generate_phantom(s);
  const auto labels = phantom_labels(s);
  for (Index i = 0; i < v.voxels(); ++i) {
    REQUIRE((labels[i] == Tissue::tumor) == (v.mask[i] == 1));
    for (int m = 0; m < v.n_modalities(); ++m)
      REQUIRE(v.modality(m)[i] == static_cast<float>(s.profiles[m][labels[i]].mean));
  }
}

TEST_CASE("gland surrounds or touches the tumor; distractors are painted") {
  Index distractor_voxels = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = small_spec(seed);
    const auto labels = phantom_labels(s);
    const auto sh = s.shape;
    bool touches = false;
    for (Index d = 1; d + 1 < sh[0] && !touches; ++d)
      for (Index h = 1; h + 1 < sh[1] && !touches; ++h)
        for (Index w = 1; w + 1 < sh[2] && !touches; ++w) {
          if (labels[flat_index(sh, d, h, w)] != Tissue::tumor) continue;
          for (const auto& o : {Triple{1, 0, 0}, Triple{0, 1, 0}, Triple{0, 0, 1}})
            for (int sign : {-1, 1})
              touches = touches ||
                        labels[flat_index(sh, d + sign * o[0], h + sign * o[1], w + sign * o[2])] == Tissue::gland;
        }
    CHECK(touches);
    for (auto t : labels) distractor_voxels += t == Tissue::vessel || t == Tissue::muscle;
  }
  CHECK(distractor_voxels > 0);
}

TEST_CASE("each distractor mimics the tumor in one modality and not in another") {
  const auto profiles = default_profiles();
  REQUIRE(profiles.size() == 3);
  for (Tissue t : {Tissue::vessel, Tissue::muscle}) {
    int similar = 0, different = 0;
    for (const auto& p : profiles) {
      const double gap = std::abs(p[t].mean - p[Tissue::tumor].mean);
      similar += gap <= p[Tissue::tumor].sd;
      different += gap > p[Tissue::tumor].sd;
    }
    CHECK(similar >= 1);
    CHECK(different >= 1);
  }
}

TEST_CASE("invalid specs are rejected") {
  auto s = small_spec(1);
  s.tumor_cc_lo = 500;
  s.tumor_cc_hi = 600;
  CHECK_THROWS_AS(generate_phantom(s), std::invalid_argument);
  s = small_spec(1);
  s.spacing[1] = 0;
  CHECK_THROWS_AS(generate_phantom(s), std::invalid_argument);
  s = small_spec(1);
  s.n_distractors = -1;
  CHECK_THROWS_AS(generate_phantom(s), std::invalid_argument);
}

TEST_CASE("phantom sets derive per-case seeds and ids") {
  PhantomSet set;
  set.count = 3;
  const auto a = case_spec(set, 1), b = case_spec(set, 2);
  CHECK(a.case_id == "case_001");
  CHECK(a.seed != b.seed);
  CHECK(case_spec(set, 1).seed == a.seed);
  CHECK_THROWS(case_spec(set, 3));
}

}  // TEST_SUITE

TEST_SUITE("volume io") {

TEST_CASE("save then load is bit exact") {
  const auto dir = scratch_dir("io");
  auto v = generate_phantom(small_spec(3));
  v.intensities[5] = -0.0f;
  v.intensities[6] = 1e-40f;  // denormal survives
  save_volume(v, dir / v.case_id);
  const auto r = load_volume(dir / v.case_id);
  CHECK(r.case_id == v.case_id);
  CHECK(r.shape == v.shape);
  CHECK(r.spacing == v.spacing);
  CHECK(r.modality_names == v.modality_names);
  CHECK(r.mask == v.mask);
  CHECK(std::memcmp(r.intensities.data(), v.intensities.data(), sizeof(float) * v.intensities.size()) == 0);
  CHECK(list_cases(dir).size() == 1);
}

TEST_CASE("corrupt cases are rejected") {
  const auto dir = scratch_dir("corrupt");
  const auto v = generate_phantom(small_spec(4));
  const auto c = dir / "c";
  auto rewrite_meta = [&](auto&& edit) {
    save_volume(v, c);
    std::ifstream in(c / "meta.json");
    auto j = nlohmann::json::parse(in);
    in.close();
    edit(j);
    std::ofstream(c / "meta.json") << j.dump();
  };
  SUBCASE("truncated raw") {
    save_volume(v, c);
    fs::resize_file(c / "mod_1.raw", fs::file_size(c / "mod_1.raw") - 4);
    CHECK_THROWS_AS(load_volume(c), DataError);
  }
  SUBCASE("truncated mask") {
    save_volume(v, c);
    fs::resize_file(c / "mask.raw", 10);
    CHECK_THROWS_AS(load_volume(c), DataError);
  }
  SUBCASE("zero spacing") {
    rewrite_meta([](auto& j) { j["spacing"][0] = 0.0; });
    CHECK_THROWS_AS(load_volume(c), DataError);
  }
  SUBCASE("unsupported version") {
    rewrite_meta([](auto& j) { j["format_version"] = 99; });
    CHECK_THROWS_AS(load_volume(c), DataError);
  }
  SUBCASE("malformed header") {
    save_volume(v, c);
    std::ofstream(c / "meta.json") << "{ not json";
    CHECK_THROWS_AS(load_volume(c), DataError);
  }
  SUBCASE("mask value 2") {
    save_volume(v, c);
    std::fstream f(c / "mask.raw", std::ios::in | std::ios::out | std::ios::binary);
    f.put(2);
    f.close();
    CHECK_THROWS_AS(load_volume(c), DataError);
  }
}

TEST_CASE("normalize gives zero mean, unit variance and is idempotent") {
  auto v = generate_phantom(small_spec(5));
  for (Index i = 0; i < v.voxels(); ++i) v.modality(2)[i] = 0.3f;  // constant channel
  const auto n = normalize(v);
  auto moments = [&](const MultimodalVolume& x, int m) {
    double s = 0, s2 = 0;
    for (Index i = 0; i < x.voxels(); ++i) s += x.modality(m)[i];
    const double mean = s / x.voxels();
    for (Index i = 0; i < x.voxels(); ++i) s2 += (x.modality(m)[i] - mean) * (x.modality(m)[i] - mean);
    return std::pair{mean, std::sqrt(s2 / x.voxels())};
  };
  for (int m = 0; m < 2; ++m) {
    const auto [mu, sd] = moments(n, m);
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(sd - 1.0) < 1e-4);
  }
  for (Index i = 0; i < n.voxels(); ++i) REQUIRE(n.modality(2)[i] == 0.0f);
  const auto nn = normalize(n);
  CHECK((nn.intensities.array() - n.intensities.array()).abs().maxCoeff() < 1e-5);
  CHECK(nn.mask == v.mask);
}

}  // TEST_SUITE

TEST_SUITE("sampling") {

TEST_CASE("foreground guarantee per batch and over many draws") {
  std::vector<MultimodalVolume> pool;
  for (std::uint64_t s = 0; s < 4; ++s) pool.push_back(generate_phantom(small_spec(s)));
  CounterRng rng(1);
  const Triple patch{8, 32, 32};
  Index fg = 0, total = 0;
  for (int it = 0; it < 5000; ++it) {
    const auto batch = sample_batch(pool, patch, 2, rng);
    REQUIRE(batch.size() == 2);
    int in_batch = 0;
    for (const auto& p : batch) {
      REQUIRE(p.intensities.shape() == Shape{3, 8, 32, 32});
      REQUIRE(p.mask.size() == 8u * 32 * 32);
      bool any = false;
      for (auto m : p.mask) any = any || m;
      REQUIRE(any == p.contains_foreground);
      in_batch += p.contains_foreground;
    }
    REQUIRE(in_batch >= 1);
    fg += in_batch;
    total += 2;
  }
  CHECK(total == 10000);
  CHECK(static_cast<double>(fg) / static_cast<double>(total) >= 0.5);
  const auto one = sample_batch(pool, patch, 1, rng);
  CHECK(one.at(0).contains_foreground);
  const auto five = sample_batch(pool, patch, 5, rng);
  int f5 = 0;
  for (const auto& p : five) f5 += p.contains_foreground;
  CHECK(f5 >= 3);
}

TEST_CASE("crops past the border are zero padded and recorded") {
  const auto v = generate_phantom(small_spec(2));
  const auto p = crop_patch(v, {-2, 60, 0}, {8, 8, 8});
  CHECK(p.pad_lo == Triple{2, 0, 0});
  CHECK(p.pad_hi == Triple{0, 4, 0});
  CHECK(p.intensities[1 * 64] == 0.0f);  // padded slice, modality 0
  CHECK(p.intensities[2 * 64] == v.modality(0)[flat_index(v.shape, 0, 60, 0)]);
  MultimodalVolume tiny = v;
  tiny.shape = {2, 4, 4};
  tiny.intensities = Tensor<float>(Shape{3, 2, 4, 4}, 0.5f);
  tiny.mask.assign(32, 0);
  tiny.mask[5] = 1;
  CounterRng rng(3);
  const auto b = sample_batch({tiny}, {8, 32, 32}, 2, rng);
  CHECK(b[0].contains_foreground);
  CHECK(b[0].intensities.shape() == Shape{3, 8, 32, 32});
}

TEST_CASE("sampling errors and stacking") {
  auto v = generate_phantom(small_spec(2));
  CounterRng rng(4);
  CHECK_THROWS_AS(sample_batch({v}, {8, 32, 32}, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_batch({}, {8, 32, 32}, 2, rng), std::invalid_argument);
  std::fill(v.mask.begin(), v.mask.end(), 0);
  CHECK_THROWS_AS(sample_batch({v}, {8, 32, 32}, 2, rng), std::runtime_error);
  const auto w = generate_phantom(small_spec(3));
  const auto batch = sample_batch({w}, {8, 16, 16}, 3, rng);
  const auto x = stack_intensities(batch, 2);
  CHECK(x.shape() == Shape{3, 2, 8, 16, 16});
  CHECK(x.at(2, 1, 3, 4, 5) == batch[2].intensities[((1 * 8 + 3) * 16 + 4) * 16 + 5]);
  const auto y = stack_masks(batch);
  CHECK(y.shape() == Shape{3, 1, 8, 16, 16});
  CHECK_THROWS(stack_intensities(batch, 4));
}

}  // TEST_SUITE
