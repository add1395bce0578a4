#pragma once

#include "ptseg/core/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ptseg::ops {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.value().array() + b.value().array());
  return Var<Scalar>::make(std::move(out), {a, b}, [](Node<Scalar>& n) {
    if (auto* g = n.parent_grad(0)) *g += n.grad.array();
    if (auto* g = n.parent_grad(1)) *g += n.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape(), a.value().array() * s);
  return Var<Scalar>::make(std::move(out), {a}, [s](Node<Scalar>& n) {
    if (auto* g = n.parent_grad(0)) *g += n.grad.array() * s;
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  const auto& x = a.value().array();
  constexpr Scalar kInvSqrt2 = Scalar(0.70710678118654752440);
  Tensor<Scalar> out(a.shape());
  auto& y = out.array();
  for (Index i = 0; i < x.size(); ++i) y[i] = Scalar(0.5) * x[i] * (Scalar(1) + std::erf(x[i] * kInvSqrt2));
  return Var<Scalar>::make(std::move(out), {a}, [](Node<Scalar>& n) {
    auto* g = n.parent_grad(0);
    if (!g) return;
    const auto& x = n.parent_value(0).array();
    const auto& dy = n.grad.array();
    const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x[i] * Scalar(0.70710678118654752440)));
      const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * x[i] * x[i]);
      (*g)[i] += dy[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope = Scalar(0.01)) {
  Tensor<Scalar> out(a.shape(), (a.value().array() > 0).select(a.value().array(), a.value().array() * slope));
  return Var<Scalar>::make(std::move(out), {a}, [slope](Node<Scalar>& n) {
    if (auto* g = n.parent_grad(0))
      *g += (n.parent_value(0).array() > 0).select(n.grad.array(), n.grad.array() * slope);
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), Scalar(1) / (Scalar(1) + (-a.value().array()).exp()));
  return Var<Scalar>::make(std::move(out), {a}, [](Node<Scalar>& n) {
    if (auto* g = n.parent_grad(0)) {
      // recompute from the input: the output buffer is not reachable here
      const auto s = (Scalar(1) / (Scalar(1) + (-n.parent_value(0).array()).exp())).eval();
      *g += n.grad.array() * s * (Scalar(1) - s);
    }
  });
}

/// Sum of all elements as a scalar node.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out(Shape{1}, a.value().array().sum());
  return Var<Scalar>::make(std::move(out), {a}, [](Node<Scalar>& n) {
    if (auto* g = n.parent_grad(0)) *g += n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Channel mixing on rank-5 maps

/// Per-voxel affine map over channels. weight has shape (Cout, Cin).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require_rank5(x.shape(), "linear");
  const Index cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) throw ShapeError("linear: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " + std::to_string(cin));
  Shape os = x.shape();
  os[1] = cout;
  Tensor<Scalar> out(os);
  Eigen::Map<const Mat<Scalar>> w(weight.value().data(), cin, cout);
  Eigen::Map<const Vec<Scalar>> b(bias.value().data(), cout);
  for (Index n = 0; n < x.dim(0); ++n) {
    auto y = out.sample_matrix(n);
    y.noalias() = x.value().sample_matrix(n) * w;
    y.rowwise() += b.transpose();
  }
  return Var<Scalar>::make(std::move(out), {x, weight, bias}, [cin, cout](Node<Scalar>& node) {
    const auto& xv = node.parent_value(0);
    Eigen::Map<const Mat<Scalar>> w(node.parent_value(1).data(), cin, cout);
    auto* gx = node.parent_grad(0);
    auto* gw = node.parent_grad(1);
    auto* gb = node.parent_grad(2);
    const Index s = xv.spatial();
    for (Index n = 0; n < xv.dim(0); ++n) {
      const auto dy = node.grad.sample_matrix(n);
      if (gx) {
        Eigen::Map<Mat<Scalar>> dx(gx->data() + n * cin * s, s, cin);
        dx.noalias() += dy * w.transpose();
      }
      if (gw) {
        Eigen::Map<Mat<Scalar>> dw(gw->data(), cin, cout);
        dw.noalias() += xv.sample_matrix(n).transpose() * dy;
      }
      if (gb) {
        Eigen::Map<Vec<Scalar>> db(gb->data(), cout);
        db += dy.colwise().sum().transpose();
      }
    }
  });
}

/// Layer normalization over channels at every voxel.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  require_rank5(x.shape(), "layer_norm");
  const Index c = x.dim(1), s = x.value().spatial(), nb = x.dim(0);
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> inv_std(Shape{nb, s});
  Eigen::Map<const Vec<Scalar>> g(gamma.value().data(), c), b(beta.value().data(), c);
  for (Index n = 0; n < nb; ++n) {
    const auto xm = x.value().sample_matrix(n);
    const Vec<Scalar> mean = xm.rowwise().mean();
    auto xh = xhat.sample_matrix(n);
    xh = xm.colwise() - mean;
    const Vec<Scalar> var = xh.array().square().rowwise().mean();
    Eigen::Map<Vec<Scalar>> is(inv_std.data() + n * s, s);
    is = (var.array() + eps).rsqrt();
    xh = is.asDiagonal() * xh;
    auto y = out.sample_matrix(n);
    y = xh * g.asDiagonal();
    y.rowwise() += b.transpose();
  }
  return Var<Scalar>::make(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), inv_std = std::move(inv_std), c, s](Node<Scalar>& node) {
    Eigen::Map<const Vec<Scalar>> g(node.parent_value(1).data(), c);
    auto* gx = node.parent_grad(0);
    auto* gg = node.parent_grad(1);
    auto* gb = node.parent_grad(2);
    for (Index n = 0; n < xhat.dim(0); ++n) {
      const auto dy = node.grad.sample_matrix(n);
      const auto xh = xhat.sample_matrix(n);
      if (gg) Eigen::Map<Vec<Scalar>>(gg->data(), c) += (dy.array() * xh.array()).colwise().sum().transpose().matrix();
      if (gb) Eigen::Map<Vec<Scalar>>(gb->data(), c) += dy.colwise().sum().transpose();
      if (gx) {
        const Mat<Scalar> dxh = dy * g.asDiagonal();
        const Vec<Scalar> m1 = dxh.rowwise().mean();
        const Vec<Scalar> m2 = (dxh.array() * xh.array()).rowwise().mean();
        Eigen::Map<const Vec<Scalar>> is(inv_std.data() + n * s, s);
        Eigen::Map<Mat<Scalar>> dx(gx->data() + n * c * s, s, c);
        dx += is.asDiagonal() * ((dxh.colwise() - m1) - (xh.array().colwise() * m2.array()).matrix());
      }
    }
  });
}

/// Instance normalization: per sample and channel over the spatial extent.
template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  require_rank5(x.shape(), "instance_norm");
  const Index nb = x.dim(0), c = x.dim(1), s = x.value().spatial();
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(nb * c));
  for (Index n = 0; n < nb; ++n) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (n * c + ch) * s;
      Eigen::Map<const Vec<Scalar>> xv(x.value().data() + off, s);
      Eigen::Map<Vec<Scalar>> xh(xhat.data() + off, s);
      const Scalar mean = xv.mean();
      xh = xv.array() - mean;
      const Scalar var = xh.squaredNorm() / Scalar(s);
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      inv_std[n * c + ch] = is;
      xh *= is;
      Eigen::Map<Vec<Scalar>>(out.data() + off, s) = (xh.array() * gamma.value()[ch] + beta.value()[ch]).matrix();
    }
  }
  return Var<Scalar>::make(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), inv_std = std::move(inv_std), nb, c, s](Node<Scalar>& node) {
    auto* gx = node.parent_grad(0);
    auto* gg = node.parent_grad(1);
    auto* gb = node.parent_grad(2);
    const auto& gamma = node.parent_value(1);
    for (Index n = 0; n < nb; ++n) {
      for (Index ch = 0; ch < c; ++ch) {
        const Index off = (n * c + ch) * s;
        Eigen::Map<const Vec<Scalar>> dy(node.grad.data() + off, s);
        Eigen::Map<const Vec<Scalar>> xh(xhat.data() + off, s);
        if (gg) (*gg)[ch] += dy.dot(xh);
        if (gb) (*gb)[ch] += dy.sum();
        if (gx) {
          const Scalar gm = gamma[ch];
          const Scalar m1 = gm * dy.mean();
          const Scalar m2 = gm * dy.dot(xh) / Scalar(s);
          Eigen::Map<Vec<Scalar>> dx(gx->data() + off, s);
          dx.array() += inv_std[n * c + ch] * (gm * dy.array() - m1 - xh.array() * m2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

struct ConvGeometry {
  Triple in{};
  Triple out{};
  Triple kernel{};
  Triple stride{};
  Triple pad_lo{};
  Triple pad_hi{};

  static ConvGeometry make(const Triple& in, const Triple& kernel, const Triple& stride, const Triple& pad_lo, const Triple& pad_hi) {
    ConvGeometry g{in, {}, kernel, stride, pad_lo, pad_hi};
    for (int a = 0; a < 3; ++a) {
      const Index span = in[a] + pad_lo[a] + pad_hi[a] - kernel[a];
      if (span < 0) throw ShapeError("conv3d: kernel larger than padded input " + to_string(in));
      g.out[a] = span / stride[a] + 1;
    }
    return g;
  }
};

namespace detail {

/// Input voxel index for every (output voxel, kernel tap), -1 in padding.
inline std::vector<std::int32_t> conv_taps(const ConvGeometry& g) {
  const Index so = prod(g.out), k = prod(g.kernel);
  std::vector<std::int32_t> taps(static_cast<std::size_t>(so * k));
  Index tap = 0;
  for (Index kd = 0; kd < g.kernel[0]; ++kd)
    for (Index kh = 0; kh < g.kernel[1]; ++kh)
      for (Index kw = 0; kw < g.kernel[2]; ++kw, ++tap) {
        Index o = 0;
        for (Index od = 0; od < g.out[0]; ++od)
          for (Index oh = 0; oh < g.out[1]; ++oh)
            for (Index ow = 0; ow < g.out[2]; ++ow, ++o) {
              const Index d = od * g.stride[0] - g.pad_lo[0] + kd;
              const Index h = oh * g.stride[1] - g.pad_lo[1] + kh;
              const Index w = ow * g.stride[2] - g.pad_lo[2] + kw;
              const bool inside = d >= 0 && d < g.in[0] && h >= 0 && h < g.in[1] && w >= 0 && w < g.in[2];
              taps[tap * so + o] = inside ? static_cast<std::int32_t>((d * g.in[1] + h) * g.in[2] + w) : -1;
            }
      }
  return taps;
}

inline Index conv_chunk_rows(Index so, Index cols) {
  const Index budget = Index{1} << 20;
  return std::clamp<Index>(budget / std::max<Index>(cols, 1), 64, std::max<Index>(so, 64));
}

}  // namespace detail

/// 3D convolution. weight has shape (Cout, Cin, kd, kh, kw). Padding may be
/// asymmetric; zero padding is implicit.
template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, const Triple& stride,
                   const Triple& pad_lo, const Triple& pad_hi) {
  require_rank5(x.shape(), "conv3d");
  const Index nb = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.rank() != 5 || weight.dim(1) != cin)
    throw ShapeError("conv3d: weight " + to_string(weight.shape()) + " does not match input channels " + std::to_string(cin));
  const Triple kernel{weight.dim(2), weight.dim(3), weight.dim(4)};
  const auto geo = ConvGeometry::make(x.value().spatial_shape(), kernel, stride, pad_lo, pad_hi);
  auto taps = std::make_shared<const std::vector<std::int32_t>>(detail::conv_taps(geo));
  const Index si = prod(geo.in), so = prod(geo.out), k = prod(kernel), cols = cin * k;
  const Index chunk = detail::conv_chunk_rows(so, cols);

  Tensor<Scalar> out(Shape{nb, cout, geo.out[0], geo.out[1], geo.out[2]});
  Eigen::Map<const Mat<Scalar>> w(weight.value().data(), cols, cout);
  Eigen::Map<const Vec<Scalar>> b(bias.value().data(), cout);
  Mat<Scalar> col;
  for (Index n = 0; n < nb; ++n) {
    const Scalar* xs = x.value().data() + n * cin * si;
    auto y = out.sample_matrix(n);
    for (Index o0 = 0; o0 < so; o0 += chunk) {
      const Index rows = std::min(chunk, so - o0);
      col.resize(rows, cols);
      for (Index ci = 0; ci < cin; ++ci)
        for (Index t = 0; t < k; ++t) {
          const std::int32_t* tp = taps->data() + t * so + o0;
          Scalar* dst = col.col(ci * k + t).data();
          const Scalar* src = xs + ci * si;
          for (Index r = 0; r < rows; ++r) dst[r] = tp[r] >= 0 ? src[tp[r]] : Scalar(0);
        }
      y.middleRows(o0, rows).noalias() = col * w;
    }
    y.rowwise() += b.transpose();
  }

  return Var<Scalar>::make(std::move(out), {x, weight, bias}, [taps, si, so, k, cin, cout, cols, chunk](Node<Scalar>& node) {
    auto* gx = node.parent_grad(0);
    auto* gw = node.parent_grad(1);
    auto* gb = node.parent_grad(2);
    const auto& xv = node.parent_value(0);
    Eigen::Map<const Mat<Scalar>> w(node.parent_value(1).data(), cols, cout);
    Mat<Scalar> col, dcol;
    for (Index n = 0; n < xv.dim(0); ++n) {
      const auto dy = node.grad.sample_matrix(n);
      if (gb) Eigen::Map<Vec<Scalar>>(gb->data(), cout) += dy.colwise().sum().transpose();
      const Scalar* xs = xv.data() + n * cin * si;
      for (Index o0 = 0; o0 < so; o0 += chunk) {
        const Index rows = std::min(chunk, so - o0);
        if (gw) {
          col.resize(rows, cols);
          for (Index ci = 0; ci < cin; ++ci)
            for (Index t = 0; t < k; ++t) {
              const std::int32_t* tp = taps->data() + t * so + o0;
              Scalar* dst = col.col(ci * k + t).data();
              const Scalar* src = xs + ci * si;
              for (Index r = 0; r < rows; ++r) dst[r] = tp[r] >= 0 ? src[tp[r]] : Scalar(0);
            }
          Eigen::Map<Mat<Scalar>> dw(gw->data(), cols, cout);
          dw.noalias() += col.transpose() * dy.middleRows(o0, rows);
        }
        if (gx) {
          dcol.noalias() = dy.middleRows(o0, rows) * w.transpose();
          Scalar* dxs = gx->data() + n * cin * si;
          for (Index ci = 0; ci < cin; ++ci)
            for (Index t = 0; t < k; ++t) {
              const std::int32_t* tp = taps->data() + t * so + o0;
              const Scalar* src = dcol.col(ci * k + t).data();
              Scalar* dst = dxs + ci * si;
              for (Index r = 0; r < rows; ++r)
                if (tp[r] >= 0) dst[tp[r]] += src[r];
            }
        }
      }
    }
  });
}

/// Transposed convolution whose kernel tiles the output without overlap:
/// output voxel i*factor + t receives input voxel i through tap t. Taps exist
/// for t < kernel (kernel <= factor per axis); the output is cropped to
/// out_shape. weight has shape (Cin, Cout, kd, kh, kw).
template <typename Scalar>
Var<Scalar> conv_transpose3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, const Triple& factor,
                             const Triple& out_shape) {
  require_rank5(x.shape(), "conv_transpose3d");
  const Index nb = x.dim(0), cin = x.dim(1), cout = weight.dim(1);
  if (weight.rank() != 5 || weight.dim(0) != cin)
    throw ShapeError("conv_transpose3d: weight " + to_string(weight.shape()) + " does not match input channels");
  const Triple kernel{weight.dim(2), weight.dim(3), weight.dim(4)};
  const Triple in = x.value().spatial_shape();
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] > factor[a]) throw ShapeError("conv_transpose3d: kernel exceeds stride");
    if (out_shape[a] > in[a] * factor[a]) throw ShapeError("conv_transpose3d: target " + to_string(out_shape) + " too large");
  }
  const Index si = prod(in), so = prod(out_shape), k = prod(kernel);
  // scatter[t * si + i] = output voxel fed by input i through tap t, or -1
  auto scatter = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(si * k), -1);
  {
    Index t = 0;
    for (Index kd = 0; kd < kernel[0]; ++kd)
      for (Index kh = 0; kh < kernel[1]; ++kh)
        for (Index kw = 0; kw < kernel[2]; ++kw, ++t) {
          Index i = 0;
          for (Index d = 0; d < in[0]; ++d)
            for (Index h = 0; h < in[1]; ++h)
              for (Index w = 0; w < in[2]; ++w, ++i) {
                const Index od = d * factor[0] + kd, oh = h * factor[1] + kh, ow = w * factor[2] + kw;
                if (od < out_shape[0] && oh < out_shape[1] && ow < out_shape[2])
                  (*scatter)[t * si + i] = static_cast<std::int32_t>((od * out_shape[1] + oh) * out_shape[2] + ow);
              }
        }
  }
  Tensor<Scalar> out(Shape{nb, cout, out_shape[0], out_shape[1], out_shape[2]});
  Eigen::Map<const RowMat<Scalar>> w(weight.value().data(), cin, cout * k);
  Mat<Scalar> z;
  for (Index n = 0; n < nb; ++n) {
    z.noalias() = x.value().sample_matrix(n) * w;
    Scalar* ys = out.data() + n * cout * so;
    for (Index co = 0; co < cout; ++co) {
      Scalar* yc = ys + co * so;
      std::fill(yc, yc + so, bias.value()[co]);
      for (Index t = 0; t < k; ++t) {
        const std::int32_t* sc = scatter->data() + t * si;
        const Scalar* zc = z.col(co * k + t).data();
        for (Index i = 0; i < si; ++i)
          if (sc[i] >= 0) yc[sc[i]] += zc[i];
      }
    }
  }
  return Var<Scalar>::make(std::move(out), {x, weight, bias}, [scatter, si, so, k, cin, cout](Node<Scalar>& node) {
    auto* gx = node.parent_grad(0);
    auto* gw = node.parent_grad(1);
    auto* gb = node.parent_grad(2);
    const auto& xv = node.parent_value(0);
    Eigen::Map<const RowMat<Scalar>> w(node.parent_value(1).data(), cin, cout * k);
    Mat<Scalar> dz(si, cout * k);
    for (Index n = 0; n < xv.dim(0); ++n) {
      const Scalar* dys = node.grad.data() + n * cout * so;
      for (Index co = 0; co < cout; ++co) {
        const Scalar* dyc = dys + co * so;
        if (gb) {
          Scalar acc = 0;
          for (Index o = 0; o < so; ++o) acc += dyc[o];
          (*gb)[co] += acc;
        }
        for (Index t = 0; t < k; ++t) {
          const std::int32_t* sc = scatter->data() + t * si;
          Scalar* dzc = dz.col(co * k + t).data();
          for (Index i = 0; i < si; ++i) dzc[i] = sc[i] >= 0 ? dyc[sc[i]] : Scalar(0);
        }
      }
      if (gx) {
        Eigen::Map<Mat<Scalar>> dx(gx->data() + n * cin * si, si, cin);
        dx.noalias() += dz * w.transpose();
      }
      if (gw) {
        Eigen::Map<RowMat<Scalar>> dw(gw->data(), cin, cout * k);
        dw.noalias() += xv.sample_matrix(n).transpose() * dz;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenation along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape os = parts.front().shape();
  require_rank5(os, "concat_channels");
  Shape ref = os;
  ref[1] = 0;
  os[1] = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    ps[1] = 0;
    require_same_shape(ps, ref, "concat_channels");
    os[1] += p.dim(1);
  }
  const Index nb = os[0], s = os[2] * os[3] * os[4], ctot = os[1];
  Tensor<Scalar> out(os);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (Index n = 0; n < nb; ++n) {
      const Scalar* src = p.value().data() + n * p.dim(1) * s;
      std::copy(src, src + p.dim(1) * s, out.data() + (n * ctot + off) * s);
    }
    off += p.dim(1);
  }
  std::vector<Index> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  return Var<Scalar>::make(std::move(out), parts, [offsets, widths, nb, s, ctot](Node<Scalar>& node) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto* g = node.parent_grad(i);
      if (!g) continue;
      for (Index n = 0; n < nb; ++n) {
        const Scalar* src = node.grad.data() + (n * ctot + offsets[i]) * s;
        Eigen::Map<Vec<Scalar>>(g->data() + n * widths[i] * s, widths[i] * s) +=
            Eigen::Map<const Vec<Scalar>>(src, widths[i] * s);
      }
    }
  });
}

/// Mean over the spatial extent: (N, C, D, H, W) -> (N, C, 1, 1, 1).
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  require_rank5(x.shape(), "global_avg_pool");
  const Index nb = x.dim(0), c = x.dim(1), s = x.value().spatial();
  Tensor<Scalar> out(Shape{nb, c, 1, 1, 1});
  for (Index i = 0; i < nb * c; ++i) out[i] = Eigen::Map<const Vec<Scalar>>(x.value().data() + i * s, s).mean();
  return Var<Scalar>::make(std::move(out), {x}, [nb, c, s](Node<Scalar>& node) {
    if (auto* g = node.parent_grad(0))
      for (Index i = 0; i < nb * c; ++i) g->segment(i * s, s) += node.grad[i] / Scalar(s);
  });
}

/// x * gate with gate of shape (N, C, 1, 1, 1).
template <typename Scalar>
Var<Scalar> channel_scale(const Var<Scalar>& x, const Var<Scalar>& gate) {
  require_rank5(x.shape(), "channel_scale");
  const Index nb = x.dim(0), c = x.dim(1), s = x.value().spatial();
  if (gate.value().size() != nb * c) throw ShapeError("channel_scale: gate shape " + to_string(gate.shape()));
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < nb * c; ++i) out.array().segment(i * s, s) = x.value().array().segment(i * s, s) * gate.value()[i];
  return Var<Scalar>::make(std::move(out), {x, gate}, [nb, c, s](Node<Scalar>& node) {
    const auto& xv = node.parent_value(0).array();
    const auto& gv = node.parent_value(1);
    auto* gx = node.parent_grad(0);
    auto* gg = node.parent_grad(1);
    for (Index i = 0; i < nb * c; ++i) {
      const auto dy = node.grad.array().segment(i * s, s);
      if (gx) gx->segment(i * s, s) += dy * gv[i];
      if (gg) (*gg)[i] += (dy * xv.segment(i * s, s)).sum();
    }
  });
}

/// Foreground probability of a two-class logit map: softmax(logits)[:, 1].
template <typename Scalar>
Var<Scalar> foreground_probability(const Var<Scalar>& logits) {
  require_rank5(logits.shape(), "foreground_probability");
  if (logits.dim(1) != 2) throw ShapeError("foreground_probability: expected 2 classes");
  const Index nb = logits.dim(0), s = logits.value().spatial();
  Tensor<Scalar> out(Shape{nb, 1, logits.dim(2), logits.dim(3), logits.dim(4)});
  for (Index n = 0; n < nb; ++n) {
    const auto l = logits.value().sample_matrix(n);
    out.array().segment(n * s, s) = Scalar(1) / (Scalar(1) + (l.col(0) - l.col(1)).array().exp());
  }
  Tensor<Scalar> saved = out;
  return Var<Scalar>::make(std::move(out), {logits}, [saved = std::move(saved), nb, s](Node<Scalar>& node) {
    auto* g = node.parent_grad(0);
    if (!g) return;
    for (Index n = 0; n < nb; ++n) {
      const auto p = saved.array().segment(n * s, s);
      const auto t = (node.grad.array().segment(n * s, s) * p * (Scalar(1) - p)).eval();
      g->segment(2 * n * s, s) -= t;
      g->segment(2 * n * s + s, s) += t;
    }
  });
}

}  // namespace ptseg::ops
