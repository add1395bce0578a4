#include "ptseg/data/phantom.hpp"

#include "ptseg/core/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

namespace ptseg {

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 random_direction(CounterRng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(dot(v, v));
    if (n > 1e-6) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

/// Axis-aligned ellipsoid; centre in voxel coordinates, semi-axes in voxels.
struct Ellipsoid {
  Vec3 centre{};
  Vec3 semi{};
  bool contains(Index d, Index h, Index w) const {
    const double a = (d - centre[0]) / semi[0], b = (h - centre[1]) / semi[1], c = (w - centre[2]) / semi[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

Index count_inside(const Ellipsoid& e) {
  Index n = 0;
  const Index d0 = static_cast<Index>(std::ceil(e.centre[0] - e.semi[0])), d1 = static_cast<Index>(std::floor(e.centre[0] + e.semi[0]));
  const Index h0 = static_cast<Index>(std::ceil(e.centre[1] - e.semi[1])), h1 = static_cast<Index>(std::floor(e.centre[1] + e.semi[1]));
  const Index w0 = static_cast<Index>(std::ceil(e.centre[2] - e.semi[2])), w1 = static_cast<Index>(std::floor(e.centre[2] + e.semi[2]));
  for (Index d = d0; d <= d1; ++d)
    for (Index h = h0; h <= h1; ++h)
      for (Index w = w0; w <= w1; ++w) n += e.contains(d, h, w);
  return n;
}

/// Places the tumor so that its voxel volume lands in [lo, hi] cc with a
/// one-voxel margin to every face.
Ellipsoid place_tumor(const PhantomSpec& spec, CounterRng& rng) {
  const double voxel_cc = spec.spacing[0] * spec.spacing[1] * spec.spacing[2] / 1000.0;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double target = rng.uniform(spec.tumor_cc_lo, spec.tumor_cc_hi) / voxel_cc;
    Vec3 aspect{}, frac{};
    for (int a = 0; a < 3; ++a) {
      aspect[a] = rng.uniform(0.8, 1.25) / spec.spacing[a];  // voxels per mm of scale
      frac[a] = rng.uniform();
    }
    // largest scale that still leaves room for the margin and a placement
    double s_max = 1e300;
    for (int a = 0; a < 3; ++a) s_max = std::min(s_max, (static_cast<double>(spec.shape[a]) - 4.0) / 2.0 / aspect[a]);
    if (!(s_max > 0)) break;

    auto at_scale = [&](double s) {
      Ellipsoid e;
      for (int a = 0; a < 3; ++a) {
        e.centre[a] = std::floor(spec.shape[a] / 2.0) + frac[a];
        e.semi[a] = std::max(s * aspect[a], 1e-9);
      }
      return e;
    };
    if (static_cast<double>(count_inside(at_scale(s_max))) < target) continue;
    double lo = 0.0, hi = s_max;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (static_cast<double>(count_inside(at_scale(mid))) >= target)
        hi = mid;
      else
        lo = mid;
    }
    Ellipsoid e = at_scale(hi);
    const double cc = static_cast<double>(count_inside(e)) * voxel_cc;
    if (cc < spec.tumor_cc_lo || cc > spec.tumor_cc_hi) continue;

    // integer translation keeps the voxel count
    for (int a = 0; a < 3; ++a) {
      const double lo_c = 1.0 + e.semi[a], hi_c = static_cast<double>(spec.shape[a]) - 2.0 - e.semi[a];
      const Index k_lo = static_cast<Index>(std::ceil(lo_c - frac[a]));
      const Index k_hi = static_cast<Index>(std::floor(hi_c - frac[a]));
      if (k_hi < k_lo) throw std::logic_error("tumor placement interval is empty");
      e.centre[a] = static_cast<double>(k_lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(k_hi - k_lo + 1)))) + frac[a];
    }
    return e;
  }
  throw std::invalid_argument("tumor volume range [" + std::to_string(spec.tumor_cc_lo) + ", " +
                              std::to_string(spec.tumor_cc_hi) + "] cc cannot be realized in this volume");
}

}  // namespace

std::vector<IntensityProfile> default_profiles() {
  //                       background     gland         tumor         vessel        muscle
  auto p = [](std::string name, double bg, double gl, double tu, double ve, double mu) {
    IntensityProfile r;
    r.name = std::move(name);
    r.tissue = {{{bg, 0.05}, {gl, 0.05}, {tu, 0.05}, {ve, 0.05}, {mu, 0.05}}};
    return r;
  };
  return {p("t1", 0.20, 0.45, 0.70, 0.72, 0.35), p("t2", 0.15, 0.35, 0.75, 0.30, 0.73),
          p("stir", 0.10, 0.55, 0.80, 0.45, 0.78)};
}

void PhantomSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("PhantomSpec: " + m); };
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 3) fail("every shape component must be at least 3");
    if (!(spacing[a] > 0.0)) fail("spacing components must be > 0");
  }
  if (!(tumor_cc_lo > 0.0) || !(tumor_cc_hi >= tumor_cc_lo)) fail("tumor volume range must satisfy 0 < lo <= hi");
  if (n_distractors < 0) fail("n_distractors must be nonnegative");
  if (profiles.empty()) fail("at least one intensity profile is required");
  if (!(noise_scale >= 0.0)) fail("noise_scale must be nonnegative");
  for (const auto& pr : profiles)
    for (const auto& t : pr.tissue)
      if (!(t.sd >= 0.0)) fail("intensity sd must be nonnegative");
  const double voxel_cc = spacing[0] * spacing[1] * spacing[2] / 1000.0;
  // the largest tumor with a one-voxel margin on every side
  double cap = 4.0 / 3.0 * std::numbers::pi;
  for (int a = 0; a < 3; ++a) cap *= std::max(0.0, (shape[a] - 4.0) / 2.0);
  if (tumor_cc_lo > cap * voxel_cc) fail("tumor volume range exceeds what fits inside shape x spacing");
  if (std::floor(tumor_cc_hi / voxel_cc) < std::ceil(tumor_cc_lo / voxel_cc))
    fail("tumor volume range contains no whole voxel count");
}

std::vector<Tissue> phantom_labels(const PhantomSpec& spec) {
  spec.validate();
  const Triple sh = spec.shape;
  const Index n = prod(sh);
  CounterRng rng = CounterRng(spec.seed).fork(1);

  const Ellipsoid tumor = place_tumor(spec, rng);

  Ellipsoid gland;
  for (int a = 0; a < 3; ++a) {
    gland.semi[a] = tumor.semi[a] * rng.uniform(1.6, 2.2);
    gland.centre[a] = tumor.centre[a] + rng.uniform(-0.5, 0.5) * tumor.semi[a];
  }

  std::vector<Tissue> labels(static_cast<std::size_t>(n), Tissue::background);
  auto each_voxel = [&](auto&& fn) {
    for (Index d = 0; d < sh[0]; ++d)
      for (Index h = 0; h < sh[1]; ++h)
        for (Index w = 0; w < sh[2]; ++w) fn(d, h, w, labels[flat_index(sh, d, h, w)]);
  };
  each_voxel([&](Index d, Index h, Index w, Tissue& t) {
    if (gland.contains(d, h, w)) t = Tissue::gland;
  });

  // distractors are geometric in mm so they keep their shape under anisotropy
  for (int k = 0; k < spec.n_distractors; ++k) {
    Vec3 anchor{};
    for (int a = 0; a < 3; ++a) anchor[a] = rng.uniform(0.0, sh[a] * spec.spacing[a]);
    const Vec3 dir = random_direction(rng);
    if (k % 2 == 0) {
      const double radius = rng.uniform(1.2, 2.5);
      each_voxel([&](Index d, Index h, Index w, Tissue& t) {
        const Vec3 r{d * spec.spacing[0] - anchor[0], h * spec.spacing[1] - anchor[1], w * spec.spacing[2] - anchor[2]};
        const double along = dot(r, dir);
        if (dot(r, r) - along * along <= radius * radius) t = Tissue::vessel;
      });
    } else {
      const double thickness = rng.uniform(2.0, 4.0), extent = rng.uniform(8.0, 16.0);
      each_voxel([&](Index d, Index h, Index w, Tissue& t) {
        const Vec3 r{d * spec.spacing[0] - anchor[0], h * spec.spacing[1] - anchor[1], w * spec.spacing[2] - anchor[2]};
        const double off = dot(r, dir);
        if (std::abs(off) <= 0.5 * thickness && dot(r, r) - off * off <= extent * extent) t = Tissue::muscle;
      });
    }
  }

  each_voxel([&](Index d, Index h, Index w, Tissue& t) {
    if (tumor.contains(d, h, w)) t = Tissue::tumor;
  });
  return labels;
}

MultimodalVolume generate_phantom(const PhantomSpec& spec) {
  const auto labels = phantom_labels(spec);
  MultimodalVolume v;
  v.case_id = spec.case_id;
  v.shape = spec.shape;
  v.spacing = spec.spacing;
  const Index n = prod(spec.shape);
  const Index m_count = static_cast<Index>(spec.profiles.size());
  v.intensities = Tensor<float>(Shape{m_count, spec.shape[0], spec.shape[1], spec.shape[2]});
  v.mask.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) v.mask[i] = labels[i] == Tissue::tumor ? 1 : 0;

  const CounterRng root(spec.seed);
  for (Index m = 0; m < m_count; ++m) {
    const auto& prof = spec.profiles[m];
    v.modality_names.push_back(prof.name.empty() ? "mod" + std::to_string(m) : prof.name);
    CounterRng noise = root.fork(100 + static_cast<std::uint64_t>(m));
    float* out = v.modality(static_cast<int>(m));
    for (Index i = 0; i < n; ++i) {
      const auto& st = prof[labels[i]];
      double x = st.mean;
      if (spec.noise_scale > 0.0) x += spec.noise_scale * st.sd * noise.normal();
      out[i] = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
  return v;
}

PhantomSpec case_spec(const PhantomSet& set, int index) {
  if (index < 0 || index >= set.count) throw std::out_of_range("case index out of range");
  PhantomSpec s = set.base;
  s.seed = CounterRng(set.seed).fork(static_cast<std::uint64_t>(index)).next_u64();
  char id[32];
  std::snprintf(id, sizeof id, "case_%03d", index);
  s.case_id = id;
  return s;
}

std::vector<MultimodalVolume> generate_set(const PhantomSet& set) {
  if (set.count < 1) throw std::invalid_argument("PhantomSet: count must be >= 1");
  std::vector<MultimodalVolume> out;
  for (int i = 0; i < set.count; ++i) out.push_back(generate_phantom(case_spec(set, i)));
  return out;
}

}  // namespace ptseg
