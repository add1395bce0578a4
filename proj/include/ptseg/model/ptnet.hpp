#pragma once

#include "ptseg/model/blocks.hpp"
#include "ptseg/model/config.hpp"

#include <string>
#include <vector>

namespace ptseg {

/// Multimodal encoder-decoder segmentation network.
///
/// Encoder: one independent branch per modality (embedding, then per stage a
/// multimodal fusion block with that modality as major input, a shift-window
/// block and patch merging). Decoder: the stacked bottlenecks go through the
/// information calibration module; each level then stacks the running map
/// with the stacked skips of that stage, applies a residual block and
/// upsamples. The two embedding resolutions are decoded the same way, with
/// the stacked first embedding block outputs and the stacked input images as
/// skips. A final 1x1x1 projection emits class logits at patch size.
template <typename Scalar>
class PTNet {
 public:
  struct Stage {
    MultimodalFusionBlock<Scalar> fusion;
    WindowBlock<Scalar> shift_block;
    PatchMerge<Scalar> merge;
  };
  struct Branch {
    Embedding<Scalar> embed;
    std::vector<Stage> stages;
  };
  struct Encoded {
    std::vector<Var<Scalar>> bottlenecks;           ///< per modality
    std::vector<std::vector<Var<Scalar>>> skips;    ///< [modality][stage], taken after the shift-window block
    std::vector<Var<Scalar>> embed_mid;              ///< per modality, first embedding block output
    std::vector<Var<Scalar>> inputs;                 ///< per modality, the raw patch
  };

  PTNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), plan_(plan_shapes(cfg)) {
    CounterRng rng(seed);
    const int m_count = cfg_.n_modalities;
    const Index c = cfg_.base_channels;
    for (int m = 0; m < m_count; ++m) {
      const std::string bn = "enc" + std::to_string(m);
      Branch br;
      br.embed = Embedding<Scalar>(store_, bn + ".embed", c, cfg_.patch_size, cfg_.embed_strides, rng);
      for (int s = 0; s < cfg_.n_stages; ++s) {
        const auto& st = plan_.stages[s];
        const std::string sn = bn + ".stage" + std::to_string(s + 1);
        Stage stage;
        stage.fusion = MultimodalFusionBlock<Scalar>(store_, sn + ".mfb", m_count, st.channels, st.heads, st.window,
                                                     cfg_.mlp_ratio, rng);
        stage.shift_block = WindowBlock<Scalar>(store_, sn + ".swb", st.channels, st.heads, st.window, st.shift,
                                                cfg_.mlp_ratio, false, rng);
        stage.merge = PatchMerge<Scalar>(store_, sn + ".pm", st.channels, st.dims, cfg_.merge_schedule[s], rng);
        br.stages.push_back(std::move(stage));
      }
      branches_.push_back(std::move(br));
    }

    const Index mc = m_count;
    const auto& last = plan_.stages.back();
    calibration_ = InformationCalibration<Scalar>(store_, "dec.icm", mc * plan_.bottleneck_channels, mc,
                                                  cfg_.merge_schedule.back(), last.dims, cfg_.se_reduction, rng);
    Index running = plan_.bottleneck_channels;
    for (int s = cfg_.n_stages - 1; s >= 0; --s) {
      const auto& st = plan_.stages[s];
      const std::string ln = "dec.level" + std::to_string(s + 1);
      levels_.insert(levels_.begin(), ResidualBlock<Scalar>(store_, ln + ".res", running + mc * st.channels, st.channels,
                                                            st.dims, false, cfg_.se_reduction, rng));
      running = st.channels;
      if (s > 0) {
        ups_.insert(ups_.begin(), ConvTranspose3d<Scalar>(store_, ln + ".up", running, running, cfg_.merge_schedule[s - 1],
                                                          plan_.stages[s - 1].dims, rng));
      }
    }
    // mirror of the embedding strides back to patch resolution
    up_mid_ = ConvTranspose3d<Scalar>(store_, "dec.embed2.up", running, c, cfg_.embed_strides[1], plan_.embed_mid, rng);
    res_mid_ = ResidualBlock<Scalar>(store_, "dec.embed2.res", c + mc * c, c, plan_.embed_mid, false, cfg_.se_reduction, rng);
    up_full_ = ConvTranspose3d<Scalar>(store_, "dec.embed1.up", c, c, cfg_.embed_strides[0], cfg_.patch_size, rng);
    res_full_ = ResidualBlock<Scalar>(store_, "dec.embed1.res", c + mc, c, cfg_.patch_size, false, cfg_.se_reduction, rng);
    head_ = Linear<Scalar>::he(store_, "dec.head", c, cfg_.n_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const ShapePlan& plan() const { return plan_; }
  ParameterStore<Scalar>& parameters() { return store_; }
  const ParameterStore<Scalar>& parameters() const { return store_; }
  const std::vector<Branch>& branches() const { return branches_; }
  std::vector<Branch>& branches() { return branches_; }

  /// Splits an (N, M, D, H, W) patch tensor into M single-channel inputs.
  static std::vector<Var<Scalar>> split_modalities(const Tensor<Scalar>& patches) {
    require_rank5(patches.shape(), "split_modalities");
    const Index nb = patches.dim(0), m = patches.dim(1), s = patches.spatial();
    std::vector<Var<Scalar>> out;
    for (Index k = 0; k < m; ++k) {
      Tensor<Scalar> t(Shape{nb, 1, patches.dim(2), patches.dim(3), patches.dim(4)});
      for (Index n = 0; n < nb; ++n)
        std::copy(patches.data() + (n * m + k) * s, patches.data() + (n * m + k + 1) * s, t.data() + n * s);
      out.emplace_back(std::move(t));
    }
    return out;
  }

  Encoded encode(const std::vector<Var<Scalar>>& modalities) const {
    const int mcount = cfg_.n_modalities;
    if (static_cast<int>(modalities.size()) != mcount)
      throw ShapeError("model expects " + std::to_string(mcount) + " modalities, got " + std::to_string(modalities.size()));
    Encoded enc;
    std::vector<Var<Scalar>> x;
    for (int m = 0; m < mcount; ++m) {
      auto [mid, out] = branches_[m].embed.forward_with_mid(modalities[m]);
      enc.embed_mid.push_back(std::move(mid));
      x.push_back(std::move(out));
    }
    enc.inputs = modalities;
    enc.skips.resize(mcount);
    for (int s = 0; s < cfg_.n_stages; ++s) {
      std::vector<Var<Scalar>> next;
      for (int m = 0; m < mcount; ++m) {
        // major first, then the other modalities in cyclic order
        std::vector<Var<Scalar>> inputs;
        for (int j = 0; j < mcount; ++j) inputs.push_back(x[(m + j) % mcount]);
        const auto& stage = branches_[m].stages[s];
        const auto z = stage.shift_block(stage.fusion(inputs));
        enc.skips[m].push_back(z);
        next.push_back(stage.merge(z));
      }
      x = std::move(next);
    }
    enc.bottlenecks = std::move(x);
    return enc;
  }

  Var<Scalar> decode(const Encoded& enc) const {
    auto h = calibration_(ops::concat_channels(enc.bottlenecks));
    for (int s = cfg_.n_stages - 1; s >= 0; --s) {
      std::vector<Var<Scalar>> parts{h};
      for (const auto& sk : enc.skips) parts.push_back(sk[s]);
      h = levels_[s](ops::concat_channels(parts));
      if (s > 0) h = ups_[s - 1](h);
    }
    auto stacked = [&h](const std::vector<Var<Scalar>>& skips) {
      std::vector<Var<Scalar>> parts{h};
      parts.insert(parts.end(), skips.begin(), skips.end());
      return ops::concat_channels(parts);
    };
    h = up_mid_(h);
    h = res_mid_(stacked(enc.embed_mid));
    h = up_full_(h);
    h = res_full_(stacked(enc.inputs));
    return head_(h);
  }

  /// (N, M, D, H, W) patches -> (N, n_classes, D, H, W) logits.
  Var<Scalar> forward(const Tensor<Scalar>& patches) const {
    require_rank5(patches.shape(), "forward");
    if (patches.spatial_shape() != cfg_.patch_size)
      throw ShapeError("input patch " + to_string(patches.spatial_shape()) + " does not match configured " +
                       to_string(cfg_.patch_size));
    return decode(encode(split_modalities(patches)));
  }

 private:
  ModelConfig cfg_;
  ShapePlan plan_;
  ParameterStore<Scalar> store_;
  std::vector<Branch> branches_;
  InformationCalibration<Scalar> calibration_;
  std::vector<ResidualBlock<Scalar>> levels_;   ///< per stage
  std::vector<ConvTranspose3d<Scalar>> ups_;    ///< ups_[s-1]: stage s+1 -> stage s resolution
  ConvTranspose3d<Scalar> up_mid_, up_full_;
  ResidualBlock<Scalar> res_mid_, res_full_;
  Linear<Scalar> head_;
};

}  // namespace ptseg
