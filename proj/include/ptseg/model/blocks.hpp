#pragma once

#include "ptseg/model/attention.hpp"
#include "ptseg/model/parameters.hpp"

#include <string>
#include <vector>

namespace ptseg {

/// 3x3x3 kernel extent reduced along axes of length 1, where the outer taps
/// would only ever see zero padding.
inline Triple clamp_kernel3(const Triple& dims) {
  Triple k{};
  for (int a = 0; a < 3; ++a) k[a] = dims[a] > 1 ? 3 : 1;
  return k;
}

// ---------------------------------------------------------------------------
// Primitive layers

template <typename Scalar>
struct Linear {
  Var<Scalar> weight, bias;

  Linear() = default;
  /// Transformer-style init: truncated normal (0.02), zero bias.
  Linear(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, CounterRng& rng)
      : weight(store.add(name + ".weight", init::truncated_normal<Scalar>({cout, cin}, 0.02, rng))),
        bias(store.add(name + ".bias", Tensor<Scalar>(Shape{cout}))) {}

  static Linear he(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, CounterRng& rng) {
    Linear l;
    l.weight = store.add(name + ".weight", init::he_normal<Scalar>({cout, cin}, cin, rng));
    l.bias = store.add(name + ".bias", Tensor<Scalar>(Shape{cout}));
    return l;
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::linear(x, weight, bias); }
};

template <typename Scalar>
struct LayerNorm {
  Var<Scalar> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<Scalar>& store, const std::string& name, Index c)
      : gamma(store.add(name + ".gamma", Tensor<Scalar>(Shape{c}, Scalar(1)))),
        beta(store.add(name + ".beta", Tensor<Scalar>(Shape{c}))) {}

  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::layer_norm(x, gamma, beta); }
};

template <typename Scalar>
struct InstanceNorm {
  Var<Scalar> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(ParameterStore<Scalar>& store, const std::string& name, Index c)
      : gamma(store.add(name + ".gamma", Tensor<Scalar>(Shape{c}, Scalar(1)))),
        beta(store.add(name + ".beta", Tensor<Scalar>(Shape{c}))) {}

  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::instance_norm(x, gamma, beta); }
};

template <typename Scalar>
struct Conv3d {
  Var<Scalar> weight, bias;
  Triple stride{1, 1, 1};
  Triple pad_lo{};
  Triple pad_hi{};

  Conv3d() = default;
  Conv3d(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, const Triple& kernel,
         const Triple& stride_, const Triple& lo, const Triple& hi, CounterRng& rng)
      : weight(store.add(name + ".weight",
                         init::he_normal<Scalar>({cout, cin, kernel[0], kernel[1], kernel[2]}, cin * prod(kernel), rng))),
        bias(store.add(name + ".bias", Tensor<Scalar>(Shape{cout}))),
        stride(stride_),
        pad_lo(lo),
        pad_hi(hi) {}

  /// Padded 3x3x3 convolution for an input of the given extent.
  static Conv3d k3(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, const Triple& in_dims,
                   const Triple& stride, CounterRng& rng) {
    const Triple k = clamp_kernel3(in_dims);
    const Triple pad{(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2};
    return Conv3d(store, name, cin, cout, k, stride, pad, pad, rng);
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::conv3d(x, weight, bias, stride, pad_lo, pad_hi); }
};

/// Non-overlapping transposed convolution (kernel = stride), cropped to a
/// fixed output extent.
template <typename Scalar>
struct ConvTranspose3d {
  Var<Scalar> weight, bias;
  Triple factor{};
  Triple out_dims{};

  ConvTranspose3d() = default;
  ConvTranspose3d(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, const Triple& factor_,
                  const Triple& target, CounterRng& rng)
      : factor(factor_), out_dims(target) {
    Triple k{};
    for (int a = 0; a < 3; ++a) k[a] = std::min(factor[a], target[a]);
    weight = store.add(name + ".weight", init::he_normal<Scalar>({cin, cout, k[0], k[1], k[2]}, cin, rng));
    bias = store.add(name + ".bias", Tensor<Scalar>(Shape{cout}));
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::conv_transpose3d(x, weight, bias, factor, out_dims); }
};

// ---------------------------------------------------------------------------
// Transformer parts

template <typename Scalar>
struct Mlp {
  Linear<Scalar> fc1, fc2;

  Mlp() = default;
  Mlp(ParameterStore<Scalar>& store, const std::string& name, Index c, double ratio, CounterRng& rng) {
    const Index hidden = std::max<Index>(1, static_cast<Index>(std::llround(ratio * static_cast<double>(c))));
    fc1 = Linear<Scalar>(store, name + ".fc1", c, hidden, rng);
    fc2 = Linear<Scalar>(store, name + ".fc2", hidden, c, rng);
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return fc2(ops::gelu(fc1(x))); }
};

/// Projections and relative position bias of one windowed attention layer.
template <typename Scalar>
struct AttentionParams {
  Linear<Scalar> query, key, value, out;
  Var<Scalar> bias_table;  ///< (heads, (2wd-1)(2wh-1)(2ww-1)), zero-initialized
  Index heads = 1;
  Triple window{};

  AttentionParams() = default;
  AttentionParams(ParameterStore<Scalar>& store, const std::string& name, Index c, Index heads_, const Triple& window_,
                  CounterRng& rng)
      : query(store, name + ".q", c, c, rng),
        key(store, name + ".k", c, c, rng),
        value(store, name + ".v", c, c, rng),
        out(store, name + ".proj", c, c, rng),
        heads(heads_),
        window(window_) {
    const Index entries = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
    bias_table = store.add(name + ".rel_bias", Tensor<Scalar>(Shape{heads, entries}));
  }
};

/// Window fusion multi-head attention: queries from the major input, keys and
/// values from the minor input. wf_msa(x, x) is ordinary windowed MSA.
template <typename Scalar>
Var<Scalar> wf_msa(const Var<Scalar>& x_major, const Var<Scalar>& x_minor, const AttentionParams<Scalar>& p,
                   const Triple& shift = {0, 0, 0}, AttentionProbe<Scalar>* probe = nullptr) {
  require_same_shape(x_major.shape(), x_minor.shape(), "wf_msa");
  const auto geo = WindowGeometry::make(x_major.value().spatial_shape(), p.window, shift);
  const auto q = p.query(x_major);
  const auto k = p.key(x_minor);
  const auto v = p.value(x_minor);
  return p.out(window_attention(q, k, v, p.bias_table, geo, p.heads, probe));
}

/// Pre-norm transformer block over windows:
///   y = x + MSA(LN(x), LN'(minor)),  out = y + MLP(LN(y)).
/// In self mode the minor input is the major input and shares its norm.
template <typename Scalar>
struct WindowBlock {
  LayerNorm<Scalar> norm_major, norm_minor, norm_mlp;
  AttentionParams<Scalar> attn;
  Mlp<Scalar> mlp;
  Triple shift{};
  bool cross = false;

  WindowBlock() = default;
  WindowBlock(ParameterStore<Scalar>& store, const std::string& name, Index c, Index heads, const Triple& window,
              const Triple& shift_, double mlp_ratio, bool cross_, CounterRng& rng)
      : shift(shift_), cross(cross_) {
    norm_major = LayerNorm<Scalar>(store, name + ".norm1", c);
    if (cross) norm_minor = LayerNorm<Scalar>(store, name + ".norm1_minor", c);
    attn = AttentionParams<Scalar>(store, name + ".attn", c, heads, window, rng);
    norm_mlp = LayerNorm<Scalar>(store, name + ".norm2", c);
    mlp = Mlp<Scalar>(store, name + ".mlp", c, mlp_ratio, rng);
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    if (cross) throw std::logic_error("cross-attention block needs a minor input");
    const auto n = norm_major(x);
    return finish(ops::add(x, wf_msa(n, n, attn, shift)));
  }

  Var<Scalar> operator()(const Var<Scalar>& x_major, const Var<Scalar>& x_minor) const {
    if (!cross) return (*this)(x_major);
    require_same_shape(x_major.shape(), x_minor.shape(), "window fusion block");
    return finish(ops::add(x_major, wf_msa(norm_major(x_major), norm_minor(x_minor), attn, shift)));
  }

 private:
  Var<Scalar> finish(const Var<Scalar>& y) const { return ops::add(y, mlp(norm_mlp(y))); }
};

/// Coarse-to-fine fusion of the major modality with up to two minor ones:
///   x12 = WFB(x1, x2), x13 = WFB(x1, x3), out = WFB(x12, x13).
/// Two inputs keep a single WFB; one input is a plain window block.
template <typename Scalar>
struct MultimodalFusionBlock {
  std::vector<WindowBlock<Scalar>> blocks;
  int arity = 3;

  MultimodalFusionBlock() = default;
  MultimodalFusionBlock(ParameterStore<Scalar>& store, const std::string& name, int arity_, Index c, Index heads,
                        const Triple& window, double mlp_ratio, CounterRng& rng)
      : arity(arity_) {
    if (arity < 1 || arity > 3) throw std::invalid_argument("multimodal fusion block arity must be 1..3");
    const Triple no_shift{0, 0, 0};
    if (arity == 1) {
      blocks.emplace_back(store, name + ".wb", c, heads, window, no_shift, mlp_ratio, false, rng);
    } else if (arity == 2) {
      blocks.emplace_back(store, name + ".wfb12", c, heads, window, no_shift, mlp_ratio, true, rng);
    } else {
      blocks.emplace_back(store, name + ".wfb12", c, heads, window, no_shift, mlp_ratio, true, rng);
      blocks.emplace_back(store, name + ".wfb13", c, heads, window, no_shift, mlp_ratio, true, rng);
      blocks.emplace_back(store, name + ".wfb_out", c, heads, window, no_shift, mlp_ratio, true, rng);
    }
  }

  /// inputs[0] is the major modality.
  Var<Scalar> operator()(const std::vector<Var<Scalar>>& inputs) const {
    if (static_cast<int>(inputs.size()) != arity)
      throw std::invalid_argument("multimodal fusion block expects " + std::to_string(arity) + " inputs, got " +
                                  std::to_string(inputs.size()));
    for (const auto& x : inputs) require_same_shape(inputs[0].shape(), x.shape(), "multimodal fusion block");
    if (arity == 1) return blocks[0](inputs[0]);
    if (arity == 2) return blocks[0](inputs[0], inputs[1]);
    const auto x12 = blocks[0](inputs[0], inputs[1]);
    const auto x13 = blocks[1](inputs[0], inputs[2]);
    return blocks[2](x12, x13);
  }
};

/// GELU -> layer norm -> strided convolution; channels double.
template <typename Scalar>
struct PatchMerge {
  LayerNorm<Scalar> norm;
  Conv3d<Scalar> reduce;
  Triple factor{};

  PatchMerge() = default;
  PatchMerge(ParameterStore<Scalar>& store, const std::string& name, Index c, const Triple& in_dims, const Triple& factor_,
             CounterRng& rng)
      : factor(factor_) {
    for (Index f : factor)
      if (f < 1) throw std::invalid_argument("merge factor must be positive");
    norm = LayerNorm<Scalar>(store, name + ".norm", c);
    Triple k{}, hi{};
    for (int a = 0; a < 3; ++a) {
      k[a] = std::min(factor[a], in_dims[a]);
      hi[a] = k[a] == factor[a] ? (in_dims[a] + factor[a] - 1) / factor[a] * factor[a] - in_dims[a] : 0;
    }
    reduce = Conv3d<Scalar>(store, name + ".reduce", c, 2 * c, k, factor, Triple{0, 0, 0}, hi, rng);
  }

  Var<Scalar> operator()(const Var<Scalar>& z) const { return reduce(norm(ops::gelu(z))); }
};

// ---------------------------------------------------------------------------
// Convolutional parts

/// Two 3x3x3 convolutions, each followed by GELU then instance norm. The
/// first carries the block stride.
template <typename Scalar>
struct ConvBlock {
  Conv3d<Scalar> conv1, conv2;
  InstanceNorm<Scalar> norm1, norm2;

  ConvBlock() = default;
  ConvBlock(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, const Triple& in_dims,
            const Triple& stride, CounterRng& rng) {
    conv1 = Conv3d<Scalar>::k3(store, name + ".conv1", cin, cout, in_dims, stride, rng);
    norm1 = InstanceNorm<Scalar>(store, name + ".norm1", cout);
    Triple mid{};
    for (int a = 0; a < 3; ++a) mid[a] = (in_dims[a] + stride[a] - 1) / stride[a];
    conv2 = Conv3d<Scalar>::k3(store, name + ".conv2", cout, cout, mid, Triple{1, 1, 1}, rng);
    norm2 = InstanceNorm<Scalar>(store, name + ".norm2", cout);
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    return norm2(ops::gelu(conv2(norm1(ops::gelu(conv1(x))))));
  }
};

/// Patch embedding: 1 channel -> C -> 2C with the two block strides.
template <typename Scalar>
struct Embedding {
  ConvBlock<Scalar> block1, block2;
  Triple patch{};
  Triple total_stride{};

  Embedding() = default;
  Embedding(ParameterStore<Scalar>& store, const std::string& name, Index c, const Triple& patch_,
            const std::array<Triple, 2>& strides, CounterRng& rng)
      : patch(patch_) {
    Triple mid{};
    for (int a = 0; a < 3; ++a) {
      total_stride[a] = strides[0][a] * strides[1][a];
      mid[a] = patch[a] / strides[0][a];
    }
    block1 = ConvBlock<Scalar>(store, name + ".block1", 1, c, patch, strides[0], rng);
    block2 = ConvBlock<Scalar>(store, name + ".block2", c, 2 * c, mid, strides[1], rng);
  }

  /// (first-block output, embedding) — the former feeds a decoder skip.
  std::pair<Var<Scalar>, Var<Scalar>> forward_with_mid(const Var<Scalar>& x) const {
    require_rank5(x.shape(), "embedding");
    if (x.dim(1) != 1) throw ShapeError("embedding expects one channel per modality, got " + to_string(x.shape()));
    for (int a = 0; a < 3; ++a)
      if (x.dim(2 + a) % total_stride[a] != 0)
        throw ShapeError("embedding input " + to_string(x.shape()) + " not divisible by stride " + to_string(total_stride));
    auto mid = block1(x);
    auto out = block2(mid);
    return {std::move(mid), std::move(out)};
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return forward_with_mid(x).second; }
};

/// Channel squeeze-and-excitation gate.
template <typename Scalar>
struct SqueezeExcitation {
  Linear<Scalar> fc1, fc2;

  SqueezeExcitation() = default;
  SqueezeExcitation(ParameterStore<Scalar>& store, const std::string& name, Index c, Index reduction, CounterRng& rng) {
    if (reduction < 1 || c % reduction != 0) throw std::invalid_argument("SE: channels not divisible by reduction");
    fc1 = Linear<Scalar>::he(store, name + ".fc1", c, c / reduction, rng);
    fc2 = Linear<Scalar>::he(store, name + ".fc2", c / reduction, c, rng);
  }

  Var<Scalar> gates(const Var<Scalar>& x) const {
    return ops::sigmoid(fc2(ops::leaky_relu(fc1(ops::global_avg_pool(x)))));
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::channel_scale(x, gates(x)); }
};

/// Residual block with instance norm and leaky ReLU, optionally followed by
/// SE channel attention.
template <typename Scalar>
struct ResidualBlock {
  Conv3d<Scalar> conv1, conv2, proj;
  InstanceNorm<Scalar> norm1, norm2, proj_norm;
  SqueezeExcitation<Scalar> se;
  bool has_proj = false;
  bool has_se = false;

  ResidualBlock() = default;
  ResidualBlock(ParameterStore<Scalar>& store, const std::string& name, Index cin, Index cout, const Triple& dims,
                bool with_se, Index se_reduction, CounterRng& rng)
      : has_proj(cin != cout), has_se(with_se) {
    conv1 = Conv3d<Scalar>::k3(store, name + ".conv1", cin, cout, dims, Triple{1, 1, 1}, rng);
    norm1 = InstanceNorm<Scalar>(store, name + ".norm1", cout);
    conv2 = Conv3d<Scalar>::k3(store, name + ".conv2", cout, cout, dims, Triple{1, 1, 1}, rng);
    norm2 = InstanceNorm<Scalar>(store, name + ".norm2", cout);
    if (has_proj) {
      proj = Conv3d<Scalar>(store, name + ".proj", cin, cout, Triple{1, 1, 1}, Triple{1, 1, 1}, Triple{}, Triple{}, rng);
      proj_norm = InstanceNorm<Scalar>(store, name + ".proj_norm", cout);
    }
    if (has_se) se = SqueezeExcitation<Scalar>(store, name + ".se", cout, se_reduction, rng);
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    const auto y = norm2(conv2(ops::leaky_relu(norm1(conv1(x)))));
    const auto skip = has_proj ? proj_norm(proj(x)) : x;
    const auto out = ops::leaky_relu(ops::add(y, skip));
    return has_se ? se(out) : out;
  }
};

/// Decoder calibration of stacked modality features: transposed convolution
/// up to out_dims, then an SE residual block; channels drop from
/// arity*k to k.
template <typename Scalar>
struct InformationCalibration {
  ConvTranspose3d<Scalar> up;
  ResidualBlock<Scalar> block;
  Index arity = 3;
  Index in_channels = 0;

  InformationCalibration() = default;
  InformationCalibration(ParameterStore<Scalar>& store, const std::string& name, Index in_channels_, Index arity_,
                         const Triple& factor, const Triple& out_dims, Index se_reduction, CounterRng& rng)
      : arity(arity_), in_channels(in_channels_) {
    if (arity < 1 || in_channels % arity != 0)
      throw std::invalid_argument("information calibration: " + std::to_string(in_channels) +
                                  " channels not divisible by " + std::to_string(arity));
    const Index k = in_channels / arity;
    up = ConvTranspose3d<Scalar>(store, name + ".up", in_channels, k, factor, out_dims, rng);
    block = ResidualBlock<Scalar>(store, name + ".res", k, k, out_dims, true, se_reduction, rng);
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    if (x.dim(1) != in_channels) throw ShapeError("information calibration expects " + std::to_string(in_channels) + " channels");
    return block(up(x));
  }
};

}  // namespace ptseg
