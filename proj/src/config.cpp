#include "ptseg/model/config.hpp"

#include <stdexcept>
#include <string>

namespace ptseg {

namespace {

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

nlohmann::json triple_json(const Triple& t) { return nlohmann::json::array({t[0], t[1], t[2]}); }

Triple triple_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected a 3-element array, got " + j.dump());
  return {j[0].get<Index>(), j[1].get<Index>(), j[2].get<Index>()};
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (n_modalities < 1 || n_modalities > 3) fail("n_modalities must be 1..3");
  if (base_channels < 1) fail("base_channels must be positive");
  if (n_stages < 1) fail("n_stages must be positive");
  if (static_cast<int>(heads_per_stage.size()) != n_stages) fail("heads_per_stage length must equal n_stages");
  if (static_cast<int>(window_size_per_stage.size()) != n_stages) fail("window_size_per_stage length must equal n_stages");
  if (static_cast<int>(merge_schedule.size()) != n_stages) fail("merge_schedule length must equal n_stages");
  if (n_classes != 2) fail("only two-class segmentation is supported");
  if (!(mlp_ratio > 0)) fail("mlp_ratio must be positive");
  if (se_reduction < 1) fail("se_reduction must be positive");
  for (const auto& f : merge_schedule) {
    const bool ok = (f == Triple{1, 2, 2}) || (f == Triple{2, 2, 2});
    if (!ok) fail("merge factors must be (1,2,2) or (2,2,2)");
  }
  for (const auto& w : window_size_per_stage)
    for (Index v : w)
      if (v < 1) fail("window sizes must be positive");
  for (const auto& s : embed_strides)
    for (Index v : s)
      if (v < 1) fail("embedding strides must be positive");
  for (Index v : patch_size)
    if (v < 1) fail("patch size must be positive");
  Index ch = 2 * base_channels;
  for (int s = 0; s < n_stages; ++s, ch *= 2) {
    if (heads_per_stage[s] < 1 || ch % heads_per_stage[s] != 0)
      fail("stage " + std::to_string(s + 1) + ": " + std::to_string(ch) + " channels not divisible by " +
           std::to_string(heads_per_stage[s]) + " heads");
  }
  if (ch % se_reduction != 0) fail("SE reduction must divide the bottleneck channels");
}

ShapePlan plan_shapes(const ModelConfig& cfg) {
  cfg.validate();
  ShapePlan plan;
  for (int a = 0; a < 3; ++a) {
    const Index total = cfg.embed_strides[0][a] * cfg.embed_strides[1][a];
    if (cfg.patch_size[a] % total != 0)
      throw ShapeError("patch " + to_string(cfg.patch_size) + " is not divisible by the embedding stride along axis " +
                       std::to_string(a));
  }
  plan.embed_mid_channels = cfg.base_channels;
  Triple dims{};
  for (int a = 0; a < 3; ++a) {
    plan.embed_mid[a] = cfg.patch_size[a] / cfg.embed_strides[0][a];
    dims[a] = plan.embed_mid[a] / cfg.embed_strides[1][a];
  }
  Index ch = 2 * cfg.base_channels;
  for (int s = 0; s < cfg.n_stages; ++s) {
    StageShape st;
    st.channels = ch;
    st.dims = dims;
    st.heads = cfg.heads_per_stage[s];
    for (int a = 0; a < 3; ++a) {
      st.window[a] = std::min(cfg.window_size_per_stage[s][a], dims[a]);
      st.shift[a] = st.window[a] >= dims[a] ? 0 : st.window[a] / 2;
    }
    plan.stages.push_back(st);
    for (int a = 0; a < 3; ++a) dims[a] = ceil_div(dims[a], cfg.merge_schedule[s][a]);
    ch *= 2;
  }
  plan.bottleneck_channels = ch;
  plan.bottleneck_dims = dims;
  return plan;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json windows = nlohmann::json::array(), merges = nlohmann::json::array();
  for (const auto& w : c.window_size_per_stage) windows.push_back(triple_json(w));
  for (const auto& m : c.merge_schedule) merges.push_back(triple_json(m));
  j = nlohmann::json{{"n_modalities", c.n_modalities},
                     {"base_channels", c.base_channels},
                     {"n_stages", c.n_stages},
                     {"heads_per_stage", c.heads_per_stage},
                     {"window_size_per_stage", windows},
                     {"merge_schedule", merges},
                     {"embed_strides", {triple_json(c.embed_strides[0]), triple_json(c.embed_strides[1])}},
                     {"n_classes", c.n_classes},
                     {"mlp_ratio", c.mlp_ratio},
                     {"patch_size", triple_json(c.patch_size)},
                     {"se_reduction", c.se_reduction}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  // keys absent from j keep the current value
  if (j.contains("n_modalities")) c.n_modalities = j.at("n_modalities").get<int>();
  if (j.contains("base_channels")) c.base_channels = j.at("base_channels").get<Index>();
  if (j.contains("n_stages")) c.n_stages = j.at("n_stages").get<int>();
  if (j.contains("heads_per_stage")) c.heads_per_stage = j.at("heads_per_stage").get<std::vector<Index>>();
  if (j.contains("window_size_per_stage")) {
    c.window_size_per_stage.clear();
    for (const auto& w : j.at("window_size_per_stage")) c.window_size_per_stage.push_back(triple_from(w));
  }
  if (j.contains("merge_schedule")) {
    c.merge_schedule.clear();
    for (const auto& m : j.at("merge_schedule")) c.merge_schedule.push_back(triple_from(m));
  }
  if (j.contains("embed_strides")) {
    const auto& e = j.at("embed_strides");
    if (!e.is_array() || e.size() != 2) throw std::invalid_argument("embed_strides must hold two triples");
    c.embed_strides = {triple_from(e[0]), triple_from(e[1])};
  }
  if (j.contains("n_classes")) c.n_classes = j.at("n_classes").get<Index>();
  if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio").get<double>();
  if (j.contains("patch_size")) c.patch_size = triple_from(j.at("patch_size"));
  if (j.contains("se_reduction")) c.se_reduction = j.at("se_reduction").get<Index>();
}

}  // namespace ptseg
