#pragma once

#include "ptseg/model/config.hpp"
#include "ptseg/model/parameters.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptseg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  int epoch = -1;
  double lambda = 1.0;
  double lr = 0.0;
  double momentum = 0.0;
  std::string loss;
  int n_modalities_used = 0;
};

/// Single file: 8-byte magic, u64 manifest length, JSON manifest, then the
/// parameters as little-endian float32 in registration order.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterStore<float>& params,
                     const CheckpointMeta& meta);

struct CheckpointData {
  ModelConfig config;
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor<float>>> parameters;
};

CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Copies the stored tensors into `params`. Throws CheckpointError when the
/// stored config differs from `expected` or any name/shape disagrees.
void load_parameters(const CheckpointData& ck, const ModelConfig& expected, ParameterStore<float>& params);

}  // namespace ptseg
