#include "ptseg/harness/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ptseg {

namespace {

constexpr char kMagic[8] = {'P', 'T', 'S', 'E', 'G', 'C', 'K', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.put(static_cast<char>((v >> (8 * b)) & 0xFF));
}

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) {
    const int c = in.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated in header");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterStore<float>& params,
                     const CheckpointMeta& meta) {
  nlohmann::json manifest;
  manifest["format"] = "ptseg-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = cfg;
  manifest["epoch"] = meta.epoch;
  manifest["lambda"] = meta.lambda;
  manifest["loss"] = meta.loss;
  manifest["n_modalities_used"] = meta.n_modalities_used;
  manifest["optimizer"] = {{"type", "sgd_nesterov"}, {"momentum", meta.momentum}, {"lr", meta.lr}};
  manifest["dtype"] = "f32le";
  nlohmann::json list = nlohmann::json::array();
  Index offset = 0;
  for (const auto& [name, v] : params.entries()) {
    list.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}, {"count", v.value().size()}});
    offset += v.value().size();
  }
  manifest["parameters"] = list;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<char> buf;
  for (const auto& [_, v] : params.entries()) {
    const auto& a = v.value().array();
    buf.resize(static_cast<std::size_t>(a.size()) * 4);
    for (Index i = 0; i < a.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(a[i]);
      for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw CheckpointError("short write to " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path.string() + " is not a ptseg checkpoint");
  const std::uint64_t len = get_u64(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("checkpoint truncated in manifest");

  CheckpointData ck;
  try {
    const auto m = nlohmann::json::parse(text);
    if (m.at("version").get<int>() != 1) throw CheckpointError("unsupported checkpoint version");
    ck.config = m.at("config").get<ModelConfig>();
    ck.meta.epoch = m.at("epoch").get<int>();
    ck.meta.lambda = m.at("lambda").get<double>();
    ck.meta.loss = m.at("loss").get<std::string>();
    ck.meta.n_modalities_used = m.value("n_modalities_used", ck.config.n_modalities);
    ck.meta.momentum = m.at("optimizer").at("momentum").get<double>();
    ck.meta.lr = m.at("optimizer").at("lr").get<double>();
    std::vector<char> buf;
    for (const auto& p : m.at("parameters")) {
      Tensor<float> t(p.at("shape").get<Shape>());
      if (t.size() != p.at("count").get<Index>()) throw CheckpointError("parameter count disagrees with its shape");
      buf.resize(static_cast<std::size_t>(t.size()) * 4);
      if (!in.read(buf.data(), static_cast<std::streamsize>(buf.size()))) throw CheckpointError("checkpoint truncated in data");
      for (Index i = 0; i < t.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + b])) << (8 * b);
        t[i] = std::bit_cast<float>(u);
      }
      ck.parameters.emplace_back(p.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (in.peek() != EOF) throw CheckpointError("trailing bytes after checkpoint data");
  return ck;
}

void load_parameters(const CheckpointData& ck, const ModelConfig& expected, ParameterStore<float>& params) {
  const nlohmann::json a = ck.config, b = expected;
  if (a != b) throw CheckpointError("checkpoint config does not match the model: stored " + a.dump() + " vs " + b.dump());
  if (ck.parameters.size() != params.entries().size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (const auto& [name, t] : ck.parameters) {
    if (!params.contains(name)) throw CheckpointError("unknown parameter " + name);
    auto v = params.get(name);
    if (v.shape() != t.shape()) throw CheckpointError("shape mismatch for " + name);
    v.mutable_value().array() = t.array();
  }
}

}  // namespace ptseg
