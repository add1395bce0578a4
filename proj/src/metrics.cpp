#include "ptseg/metrics/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <stdexcept>

namespace ptseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_size(const Mask& a, const Mask& b, const char* what) {
  if (a.size() != b.size())
    throw ShapeError(std::string(what) + ": mask sizes differ (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
}

bool empty_mask(const Mask& m) {
  return std::none_of(m.begin(), m.end(), [](std::uint8_t x) { return x != 0; });
}

/// 1-D lower envelope of parabolas w (q - p)^2 + f(p), in place over a
/// strided line. Sites with f = inf are skipped.
void envelope_1d(double* f, Index n, Index stride, double w, std::vector<double>& buf, std::vector<Index>& v,
                 std::vector<double>& z) {
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (Index i = 0; i < n; ++i) buf[i] = f[i * stride];
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    if (!std::isfinite(buf[q])) continue;
    for (;;) {
      if (k < 0) {
        v[0] = q;
        z[0] = -kInf;
        z[1] = kInf;
        k = 0;
        break;
      }
      const Index p = v[k];
      const double s = ((buf[q] + w * q * q) - (buf[p] + w * p * p)) / (2.0 * w * static_cast<double>(q - p));
      if (s <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
      break;
    }
  }
  if (k < 0) return;  // no sites on this line
  Index j = 0;
  for (Index q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double dq = static_cast<double>(q - v[j]);
    f[q * stride] = w * dq * dq + buf[v[j]];
  }
}

}  // namespace

Confusion confusion(const Mask& pred, const Mask& gt) {
  require_same_size(pred, gt, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

double precision(const Confusion& c) {
  if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

double recall(const Confusion& c) {
  if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double dice(const Confusion& c) {
  const auto denom = 2 * c.tp + c.fn + c.fp;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

Mask surface_voxels(const Mask& m, const Triple& sh) {
  if (static_cast<Index>(m.size()) != prod(sh)) throw ShapeError("surface_voxels: mask size does not match shape");
  Mask out(m.size(), 0);
  auto fg = [&](Index d, Index h, Index w) {
    if (d < 0 || h < 0 || w < 0 || d >= sh[0] || h >= sh[1] || w >= sh[2]) return false;
    return m[flat_index(sh, d, h, w)] != 0;
  };
  for (Index d = 0; d < sh[0]; ++d)
    for (Index h = 0; h < sh[1]; ++h)
      for (Index w = 0; w < sh[2]; ++w) {
        if (!fg(d, h, w)) continue;
        const bool interior = fg(d - 1, h, w) && fg(d + 1, h, w) && fg(d, h - 1, w) && fg(d, h + 1, w) &&
                              fg(d, h, w - 1) && fg(d, h, w + 1);
        out[flat_index(sh, d, h, w)] = interior ? 0 : 1;
      }
  return out;
}

std::vector<double> squared_distance_transform(const Mask& sites, const Triple& sh, const Spacing& sp) {
  if (static_cast<Index>(sites.size()) != prod(sh)) throw ShapeError("distance transform: mask size does not match shape");
  std::vector<double> f(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) f[i] = sites[i] ? 0.0 : kInf;
  std::vector<double> buf, z;
  std::vector<Index> v;
  const Index sd = sh[1] * sh[2], shh = sh[2];
  for (Index h = 0; h < sh[1]; ++h)
    for (Index w = 0; w < sh[2]; ++w) envelope_1d(f.data() + h * shh + w, sh[0], sd, sp[0] * sp[0], buf, v, z);
  for (Index d = 0; d < sh[0]; ++d)
    for (Index w = 0; w < sh[2]; ++w) envelope_1d(f.data() + d * sd + w, sh[1], shh, sp[1] * sp[1], buf, v, z);
  for (Index d = 0; d < sh[0]; ++d)
    for (Index h = 0; h < sh[1]; ++h) envelope_1d(f.data() + d * sd + h * shh, sh[2], 1, sp[2] * sp[2], buf, v, z);
  return f;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SurfaceDistances surface_distances(const Mask& pred, const Mask& gt, const Triple& sh, const Spacing& sp) {
  require_same_size(pred, gt, "surface_distances");
  for (double s : sp)
    if (!(s > 0)) throw std::invalid_argument("surface_distances: spacing must be positive");
  const bool pe = empty_mask(pred), ge = empty_mask(gt);
  SurfaceDistances r;
  if (pe && ge) return r;
  if (pe || ge) {
    double diag = 0.0;
    for (int a = 0; a < 3; ++a) diag += std::pow(static_cast<double>(sh[a]) * sp[a], 2);
    diag = std::sqrt(diag);
    r.hd95 = r.asd = r.asd_symmetric = diag;
    return r;
  }
  const Mask sp_pred = surface_voxels(pred, sh), sp_gt = surface_voxels(gt, sh);
  const auto to_gt = squared_distance_transform(sp_gt, sh, sp);
  const auto to_pred = squared_distance_transform(sp_pred, sh, sp);
  std::vector<double> pooled;
  double sum_pg = 0.0, sum_gp = 0.0;
  std::size_t n_p = 0, n_g = 0;
  for (std::size_t i = 0; i < sp_pred.size(); ++i) {
    if (sp_pred[i]) {
      const double d = std::sqrt(to_gt[i]);
      pooled.push_back(d);
      sum_pg += d;
      ++n_p;
    }
    if (sp_gt[i]) {
      const double d = std::sqrt(to_pred[i]);
      pooled.push_back(d);
      sum_gp += d;
      ++n_g;
    }
  }
  r.hd95 = percentile(std::move(pooled), 0.95);
  r.asd = sum_pg / static_cast<double>(n_p);
  r.asd_symmetric = (sum_pg + sum_gp) / static_cast<double>(n_p + n_g);
  return r;
}

std::string to_string(VolumeGroup g) {
  switch (g) {
    case VolumeGroup::A: return "A";
    case VolumeGroup::B: return "B";
    case VolumeGroup::C: return "C";
  }
  return "?";
}

VolumeGroup assign_group(double cc, const GroupThresholds& t) {
  if (cc > t.hi) return VolumeGroup::A;
  if (cc >= t.lo) return VolumeGroup::B;
  return VolumeGroup::C;
}

CaseMetrics evaluate_case(const std::string& case_id, const Mask& pred, const Mask& gt, const Triple& shape,
                          const Spacing& spacing, const GroupThresholds& t) {
  const auto c = confusion(pred, gt);
  const auto sd = surface_distances(pred, gt, shape, spacing);
  CaseMetrics m;
  m.case_id = case_id;
  m.precision = precision(c);
  m.recall = recall(c);
  m.dice = dice(c);
  m.hd95_mm = sd.hd95;
  m.asd_mm = sd.asd;
  m.tumor_volume_cc = static_cast<double>(c.tp + c.fn) * spacing[0] * spacing[1] * spacing[2] / 1000.0;
  m.group = assign_group(m.tumor_volume_cc, t);
  return m;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.sd = std::sqrt(ss / static_cast<double>(values.size()));
  return a;
}

double metric_value(const CaseMetrics& c, const std::string& name) {
  if (name == "precision") return c.precision;
  if (name == "recall") return c.recall;
  if (name == "dice") return c.dice;
  if (name == "hd95_mm") return c.hd95_mm;
  if (name == "asd_mm") return c.asd_mm;
  throw std::invalid_argument("unknown metric " + name);
}

MetricsReport build_report(const std::vector<CaseMetrics>& cases) {
  if (cases.empty()) throw std::invalid_argument("build_report: no cases");
  MetricsReport r;
  r.cases = cases;
  auto fill = [&](const std::string& key, auto&& keep) {
    std::map<std::string, Aggregate> agg;
    for (const auto& name : metric_names()) {
      std::vector<double> vals;
      for (const auto& c : cases)
        if (keep(c)) vals.push_back(metric_value(c, name));
      if (vals.empty()) return;
      agg[name] = aggregate(vals);
    }
    r.groups[key] = std::move(agg);
  };
  fill("overall", [](const CaseMetrics&) { return true; });
  for (auto g : {VolumeGroup::A, VolumeGroup::B, VolumeGroup::C})
    fill(to_string(g), [g](const CaseMetrics& c) { return c.group == g; });
  return r;
}

void emit_report(const MetricsReport& report, const std::filesystem::path& csv_path, const std::filesystem::path& json_path) {
  if (report.cases.empty()) throw std::invalid_argument("emit_report: no cases");
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
    csv << std::setprecision(10);
    csv << "case_id,group,tumor_volume_cc";
    for (const auto& n : metric_names()) csv << ',' << n;
    csv << '\n';
    for (const auto& c : report.cases) {
      csv << c.case_id << ',' << to_string(c.group) << ',' << c.tumor_volume_cc;
      for (const auto& n : metric_names()) csv << ',' << metric_value(c, n);
      csv << '\n';
    }
    for (const auto& [g, agg] : report.groups) {
      for (const char* stat : {"mean", "sd"}) {
        csv << stat << ',' << g << ',';
        for (const auto& n : metric_names()) csv << ',' << (stat[0] == 'm' ? agg.at(n).mean : agg.at(n).sd);
        csv << '\n';
      }
    }
  }
  if (!json_path.empty()) {
    nlohmann::json j;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : report.cases) {
      nlohmann::json row{{"case_id", c.case_id}, {"group", to_string(c.group)}, {"tumor_volume_cc", c.tumor_volume_cc}};
      for (const auto& n : metric_names()) row[n] = metric_value(c, n);
      j["cases"].push_back(row);
    }
    for (const auto& [g, agg] : report.groups) {
      nlohmann::json gj;
      for (const auto& [n, a] : agg) gj[n] = {{"mean", a.mean}, {"sd", a.sd}, {"count", a.count}};
      j["groups"][g] = gj;
    }
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write " + json_path.string());
    out << j.dump(2) << '\n';
  }
}

}  // namespace ptseg
