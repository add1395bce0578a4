#pragma once

#include "ptseg/core/tensor.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace ptseg {

/// Architecture hyperparameters of the segmentation network.
struct ModelConfig {
  int n_modalities = 3;
  Index base_channels = 24;
  int n_stages = 4;
  std::vector<Index> heads_per_stage{4, 8, 16, 32};
  std::vector<Triple> window_size_per_stage{{2, 4, 4}, {2, 4, 4}, {2, 4, 4}, {2, 4, 4}};
  std::vector<Triple> merge_schedule{{1, 2, 2}, {1, 2, 2}, {2, 2, 2}, {2, 2, 2}};
  std::array<Triple, 2> embed_strides{{{2, 2, 2}, {1, 2, 2}}};
  Index n_classes = 2;
  double mlp_ratio = 4.0;
  Triple patch_size{8, 320, 320};
  Index se_reduction = 4;

  /// Full-size configuration: 8x320x320 patches, C = 24.
  static ModelConfig paper() { return ModelConfig{}; }

  /// Desk-scale configuration used by the toy training profile.
  static ModelConfig toy() {
    ModelConfig c;
    c.base_channels = 8;
    c.patch_size = {8, 32, 32};
    c.mlp_ratio = 2.0;
    return c;
  }

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

/// Resolved geometry of one encoder stage.
struct StageShape {
  Index channels = 0;
  Triple dims{};
  Triple window{};  ///< effective window (clamped to the map)
  Triple shift{};   ///< shift used by the shift-window block
  Index heads = 0;
};

/// Closed-form shape plan of the network for one config.
struct ShapePlan {
  Index embed_mid_channels = 0;  ///< after the first embedding block
  Triple embed_mid{};
  std::vector<StageShape> stages;
  Index bottleneck_channels = 0;
  Triple bottleneck_dims{};
};

/// Computes every encoder shape from the config alone. Throws ShapeError when
/// the patch is not divisible by the cumulative embedding stride.
ShapePlan plan_shapes(const ModelConfig& cfg);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace ptseg
