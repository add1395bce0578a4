#include "ptseg/data/volume.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

namespace ptseg {

namespace fs = std::filesystem;

namespace {

constexpr int kFormatVersion = 1;

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + p.string());
}

std::vector<char> encode_f32le(const float* src, Index n) {
  std::vector<char> out(static_cast<std::size_t>(n) * 4);
  for (Index i = 0; i < n; ++i) {
    const auto u = std::bit_cast<std::uint32_t>(src[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
  }
  return out;
}

void decode_f32le(const std::vector<char>& bytes, float* dst, Index n) {
  for (Index i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    dst[i] = std::bit_cast<float>(u);
  }
}

}  // namespace

Index MultimodalVolume::foreground_voxels() const {
  return static_cast<Index>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

double MultimodalVolume::diagonal_mm() const {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) s += std::pow(static_cast<double>(shape[a]) * spacing[a], 2);
  return std::sqrt(s);
}

void MultimodalVolume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 1) throw DataError(case_id + ": shape components must be positive");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) throw DataError(case_id + ": spacing components must be > 0");
  }
  const Index n = voxels();
  if (static_cast<Index>(mask.size()) != n) throw DataError(case_id + ": mask size does not match shape");
  const Shape expect{static_cast<Index>(modality_names.size()), shape[0], shape[1], shape[2]};
  if (intensities.shape() != expect && !(modality_names.empty() && intensities.empty()))
    throw DataError(case_id + ": intensities " + to_string(intensities.shape()) + " do not match " + to_string(expect));
  for (auto m : mask)
    if (m > 1) throw DataError(case_id + ": mask values must be 0 or 1");
}

void save_volume(const MultimodalVolume& v, const fs::path& dir) {
  v.validate();
  fs::create_directories(dir);
  nlohmann::json meta{
      {"format_version", kFormatVersion},
      {"case_id", v.case_id},
      {"shape", {v.shape[0], v.shape[1], v.shape[2]}},
      {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
      {"modalities", v.modality_names},
      {"dtype", {{"modalities", "f32le"}, {"mask", "u8"}}},
  };
  for (int m = 0; m < v.n_modalities(); ++m)
    write_bytes(dir / ("mod_" + std::to_string(m) + ".raw"), encode_f32le(v.modality(m), v.voxels()));
  write_bytes(dir / "mask.raw", std::vector<char>(v.mask.begin(), v.mask.end()));
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

MultimodalVolume load_volume(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  nlohmann::json meta;
  try {
    std::ifstream in(meta_path);
    if (!in) throw DataError("missing " + meta_path.string());
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed header " + meta_path.string() + ": " + e.what());
  }

  MultimodalVolume v;
  try {
    const int version = meta.at("format_version").get<int>();
    if (version != kFormatVersion) throw DataError("unsupported format_version " + std::to_string(version));
    v.case_id = meta.value("case_id", dir.filename().string());
    const auto& sh = meta.at("shape");
    const auto& sp = meta.at("spacing");
    if (sh.size() != 3 || sp.size() != 3) throw DataError("shape and spacing must have 3 components");
    for (int a = 0; a < 3; ++a) {
      v.shape[a] = sh.at(a).get<Index>();
      v.spacing[a] = sp.at(a).get<double>();
    }
    v.modality_names = meta.at("modalities").get<std::vector<std::string>>();
    const auto& dt = meta.at("dtype");
    if (dt.at("modalities").get<std::string>() != "f32le" || dt.at("mask").get<std::string>() != "u8")
      throw DataError("unsupported dtype " + dt.dump());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed header " + meta_path.string() + ": " + e.what());
  }
  for (int a = 0; a < 3; ++a) {
    if (v.shape[a] < 1) throw DataError(meta_path.string() + ": shape components must be positive");
    if (!(v.spacing[a] > 0.0)) throw DataError(meta_path.string() + ": spacing components must be > 0");
  }

  const Index n = v.voxels();
  const Index m_count = v.n_modalities();
  if (m_count > 0) v.intensities = Tensor<float>(Shape{m_count, v.shape[0], v.shape[1], v.shape[2]});
  for (int m = 0; m < m_count; ++m) {
    const fs::path p = dir / ("mod_" + std::to_string(m) + ".raw");
    const auto bytes = read_bytes(p);
    if (static_cast<Index>(bytes.size()) != 4 * n)
      throw DataError(p.string() + ": byte count " + std::to_string(bytes.size()) + " does not match shape (" +
                      std::to_string(4 * n) + " expected)");
    decode_f32le(bytes, v.modality(m), n);
  }
  const fs::path mp = dir / "mask.raw";
  const auto bytes = read_bytes(mp);
  if (static_cast<Index>(bytes.size()) != n)
    throw DataError(mp.string() + ": byte count " + std::to_string(bytes.size()) + " does not match shape (" +
                    std::to_string(n) + " expected)");
  v.mask.assign(bytes.begin(), bytes.end());
  v.validate();
  return v;
}

std::vector<fs::path> list_cases(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<MultimodalVolume> load_dataset(const fs::path& root) {
  std::vector<MultimodalVolume> out;
  for (const auto& p : list_cases(root)) out.push_back(load_volume(p));
  if (out.empty()) throw DataError("no cases under " + root.string());
  return out;
}

MultimodalVolume normalize(const MultimodalVolume& v) {
  MultimodalVolume out = v;
  const Index n = v.voxels();
  for (int m = 0; m < v.n_modalities(); ++m) {
    const Eigen::Map<const Eigen::ArrayXf> src(v.modality(m), n);
    const Eigen::ArrayXd x = src.cast<double>();
    const double mean = x.mean();
    const double sd = std::sqrt((x - mean).square().mean());
    Eigen::Map<Eigen::ArrayXf> dst(out.modality(m), n);
    if (sd < 1e-12)
      dst.setZero();
    else
      dst = ((x - mean) / sd).cast<float>();
  }
  return out;
}

}  // namespace ptseg
