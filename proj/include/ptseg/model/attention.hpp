#pragma once

#include "ptseg/core/ops.hpp"

#include <cstdint>
#include <limits>

namespace ptseg {

/// Window layout of a feature map: effective window, cyclic shift, right
/// padding and the per-token bookkeeping shared by partition, reverse and the
/// attention kernel.
struct WindowGeometry {
  Triple dims{};
  Triple window{};
  Triple shift{};
  Triple padded{};
  Triple grid{};  ///< windows per axis
  Index tokens = 0;
  Index windows = 0;
  /// token_index[w * tokens + t]: spatial index in the unpadded map, -1 for padding.
  std::vector<std::int32_t> token_index;
  /// region[w * tokens + t]: shifted-window region label; tokens attend only within a label.
  std::vector<std::uint8_t> region;
  /// rel_index[i * tokens + j]: row of the relative position bias table.
  std::vector<std::int32_t> rel_index;

  Index bias_table_size() const { return (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1); }

  /// Windows larger than the map shrink to it. A shift along an axis covered
  /// by a single window is dropped, as there is no boundary there.
  static WindowGeometry make(const Triple& dims, const Triple& window, const Triple& shift) {
    WindowGeometry g;
    g.dims = dims;
    for (int a = 0; a < 3; ++a) {
      if (window[a] < 1) throw ShapeError("window must be positive");
      g.window[a] = std::min(window[a], dims[a]);
      g.padded[a] = (dims[a] + g.window[a] - 1) / g.window[a] * g.window[a];
      g.grid[a] = g.padded[a] / g.window[a];
      g.shift[a] = g.grid[a] == 1 ? 0 : shift[a] % g.window[a];
    }
    g.tokens = prod(g.window);
    g.windows = prod(g.grid);
    g.token_index.resize(static_cast<std::size_t>(g.windows * g.tokens));
    g.region.resize(g.token_index.size());
    auto label = [&](int a, Index p) -> Index {
      if (g.shift[a] == 0) return 0;
      if (p < g.padded[a] - g.window[a]) return 0;
      if (p < g.padded[a] - g.shift[a]) return 1;
      return 2;
    };
    Index w = 0;
    for (Index bd = 0; bd < g.grid[0]; ++bd)
      for (Index bh = 0; bh < g.grid[1]; ++bh)
        for (Index bw = 0; bw < g.grid[2]; ++bw, ++w) {
          Index t = 0;
          for (Index ld = 0; ld < g.window[0]; ++ld)
            for (Index lh = 0; lh < g.window[1]; ++lh)
              for (Index lw = 0; lw < g.window[2]; ++lw, ++t) {
                // position in the shifted (rolled by -shift) padded grid
                const Index pd = bd * g.window[0] + ld, ph = bh * g.window[1] + lh, pw = bw * g.window[2] + lw;
                const Index od = (pd + g.shift[0]) % g.padded[0];
                const Index oh = (ph + g.shift[1]) % g.padded[1];
                const Index ow = (pw + g.shift[2]) % g.padded[2];
                const bool real = od < dims[0] && oh < dims[1] && ow < dims[2];
                const std::size_t slot = static_cast<std::size_t>(w * g.tokens + t);
                g.token_index[slot] = real ? static_cast<std::int32_t>((od * dims[1] + oh) * dims[2] + ow) : -1;
                g.region[slot] = static_cast<std::uint8_t>(label(0, pd) * 9 + label(1, ph) * 3 + label(2, pw));
              }
        }
    g.rel_index.resize(static_cast<std::size_t>(g.tokens * g.tokens));
    const Index sh = 2 * g.window[1] - 1, sw = 2 * g.window[2] - 1;
    for (Index i = 0; i < g.tokens; ++i) {
      const Index id = i / (g.window[1] * g.window[2]), ih = (i / g.window[2]) % g.window[1], iw = i % g.window[2];
      for (Index j = 0; j < g.tokens; ++j) {
        const Index jd = j / (g.window[1] * g.window[2]), jh = (j / g.window[2]) % g.window[1], jw = j % g.window[2];
        const Index rd = id - jd + g.window[0] - 1, rh = ih - jh + g.window[1] - 1, rw = iw - jw + g.window[2] - 1;
        g.rel_index[static_cast<std::size_t>(i * g.tokens + j)] = static_cast<std::int32_t>((rd * sh + rh) * sw + rw);
      }
    }
    return g;
  }

  /// Whether query token i may attend to key token j inside window w.
  bool allowed(Index w, Index i, Index j) const {
    const std::size_t si = static_cast<std::size_t>(w * tokens + i), sj = static_cast<std::size_t>(w * tokens + j);
    return token_index[sj] >= 0 && region[si] == region[sj];
  }
};

/// Cyclic shift then partition: (N, C, D, H, W) -> (N, windows, tokens, C).
/// Padding tokens are zero.
template <typename Scalar>
Tensor<Scalar> window_partition(const Tensor<Scalar>& x, const WindowGeometry& g) {
  require_rank5(x.shape(), "window_partition");
  if (x.spatial_shape() != g.dims) throw ShapeError("window_partition: geometry built for " + to_string(g.dims));
  const Index nb = x.dim(0), c = x.dim(1), s = x.spatial();
  Tensor<Scalar> out(Shape{nb, g.windows, g.tokens, c});
  for (Index n = 0; n < nb; ++n)
    for (Index w = 0; w < g.windows; ++w)
      for (Index t = 0; t < g.tokens; ++t) {
        const auto src = g.token_index[static_cast<std::size_t>(w * g.tokens + t)];
        if (src < 0) continue;
        Scalar* dst = out.data() + ((n * g.windows + w) * g.tokens + t) * c;
        for (Index ch = 0; ch < c; ++ch) dst[ch] = x.data()[(n * c + ch) * s + src];
      }
  return out;
}

/// Inverse of window_partition: drops padding and undoes the shift.
template <typename Scalar>
Tensor<Scalar> window_reverse(const Tensor<Scalar>& windows, const WindowGeometry& g) {
  if (windows.rank() != 4 || windows.dim(1) != g.windows || windows.dim(2) != g.tokens)
    throw ShapeError("window_reverse: layout " + to_string(windows.shape()) + " does not match geometry");
  const Index nb = windows.dim(0), c = windows.dim(3), s = prod(g.dims);
  Tensor<Scalar> out(Shape{nb, c, g.dims[0], g.dims[1], g.dims[2]});
  for (Index n = 0; n < nb; ++n)
    for (Index w = 0; w < g.windows; ++w)
      for (Index t = 0; t < g.tokens; ++t) {
        const auto dst = g.token_index[static_cast<std::size_t>(w * g.tokens + t)];
        if (dst < 0) continue;
        const Scalar* src = windows.data() + ((n * g.windows + w) * g.tokens + t) * c;
        for (Index ch = 0; ch < c; ++ch) out.data()[(n * c + ch) * s + dst] = src[ch];
      }
  return out;
}

/// Optional capture of attention matrices, one (tokens x tokens) matrix per
/// (sample, window, head) in that order.
template <typename Scalar>
struct AttentionProbe {
  std::vector<ops::Mat<Scalar>> weights;
};

/// Windowed multi-head attention core:
/// softmax(Q K^T / sqrt(d) + B) V per window and head, with queries from q and
/// keys/values from k and v (all (N, C, D, H, W)). bias_table is
/// (heads, bias_table_size). Disallowed pairs get exactly zero weight.
template <typename Scalar>
Var<Scalar> window_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, const Var<Scalar>& bias_table,
                             const WindowGeometry& geo, Index heads, AttentionProbe<Scalar>* probe = nullptr) {
  using ops::Mat;
  require_rank5(q.shape(), "window_attention");
  require_same_shape(q.shape(), k.shape(), "window_attention (q, k)");
  require_same_shape(q.shape(), v.shape(), "window_attention (q, v)");
  if (q.value().spatial_shape() != geo.dims) throw ShapeError("window_attention: geometry built for " + to_string(geo.dims));
  const Index nb = q.dim(0), c = q.dim(1), s = q.value().spatial(), T = geo.tokens;
  if (heads < 1 || c % heads != 0) throw ShapeError("window_attention: channels not divisible by heads");
  if (bias_table.value().size() != heads * geo.bias_table_size())
    throw ShapeError("window_attention: bias table " + to_string(bias_table.shape()) + " does not match window " +
                     to_string(geo.window));
  const Index dh = c / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  const Index nbt = geo.bias_table_size();

  auto gather = [&geo, s, c, T, dh](const Tensor<Scalar>& src, Index n, Index w, Index h, Mat<Scalar>& dst) {
    dst.setZero(T, dh);
    for (Index t = 0; t < T; ++t) {
      const auto idx = geo.token_index[static_cast<std::size_t>(w * T + t)];
      if (idx < 0) continue;
      for (Index j = 0; j < dh; ++j) dst(t, j) = src.data()[(n * c + h * dh + j) * s + idx];
    }
  };

  Tensor<Scalar> out(q.shape());
  auto probs = std::make_shared<std::vector<Mat<Scalar>>>();
  probs->reserve(static_cast<std::size_t>(nb * geo.windows * heads));
  Mat<Scalar> qw, kw, vw, logits, ow;
  for (Index n = 0; n < nb; ++n)
    for (Index w = 0; w < geo.windows; ++w)
      for (Index h = 0; h < heads; ++h) {
        gather(q.value(), n, w, h, qw);
        gather(k.value(), n, w, h, kw);
        gather(v.value(), n, w, h, vw);
        logits.noalias() = (qw * kw.transpose()) * scale;
        Mat<Scalar> p(T, T);
        const Scalar* table = bias_table.value().data() + h * nbt;
        for (Index i = 0; i < T; ++i) {
          Scalar mx = -std::numeric_limits<Scalar>::infinity();
          for (Index j = 0; j < T; ++j) {
            if (!geo.allowed(w, i, j)) continue;
            logits(i, j) += table[geo.rel_index[static_cast<std::size_t>(i * T + j)]];
            mx = std::max(mx, logits(i, j));
          }
          Scalar denom = 0;
          for (Index j = 0; j < T; ++j) {
            if (geo.allowed(w, i, j)) {
              p(i, j) = std::exp(logits(i, j) - mx);
              denom += p(i, j);
            } else {
              p(i, j) = Scalar(0);
            }
          }
          if (denom > 0) p.row(i) /= denom;
        }
        ow.noalias() = p * vw;
        for (Index t = 0; t < T; ++t) {
          const auto idx = geo.token_index[static_cast<std::size_t>(w * T + t)];
          if (idx < 0) continue;
          for (Index j = 0; j < dh; ++j) out.data()[(n * c + h * dh + j) * s + idx] = ow(t, j);
        }
        if (probe) probe->weights.push_back(p);
        probs->push_back(std::move(p));
      }

  auto geo_ptr = std::make_shared<const WindowGeometry>(geo);
  return Var<Scalar>::make(std::move(out), {q, k, v, bias_table}, [probs, geo_ptr, heads, dh, scale, nbt, c, s, T](Node<Scalar>& node) {
    const WindowGeometry& g = *geo_ptr;
    auto* gq = node.parent_grad(0);
    auto* gk = node.parent_grad(1);
    auto* gv = node.parent_grad(2);
    auto* gb = node.parent_grad(3);
    auto gather = [&g, s, c, T, dh](const Scalar* src, Index n, Index w, Index h, Mat<Scalar>& dst) {
      dst.setZero(T, dh);
      for (Index t = 0; t < T; ++t) {
        const auto idx = g.token_index[static_cast<std::size_t>(w * T + t)];
        if (idx < 0) continue;
        for (Index j = 0; j < dh; ++j) dst(t, j) = src[(n * c + h * dh + j) * s + idx];
      }
    };
    auto scatter_add = [&g, s, c, T, dh](Scalar* dst, Index n, Index w, Index h, const Mat<Scalar>& src) {
      for (Index t = 0; t < T; ++t) {
        const auto idx = g.token_index[static_cast<std::size_t>(w * T + t)];
        if (idx < 0) continue;
        for (Index j = 0; j < dh; ++j) dst[(n * c + h * dh + j) * s + idx] += src(t, j);
      }
    };
    Mat<Scalar> qw, kw, vw, dow, dp, dl, tmp;
    const Index nb = node.value.dim(0);
    std::size_t slot = 0;
    for (Index n = 0; n < nb; ++n)
      for (Index w = 0; w < g.windows; ++w)
        for (Index h = 0; h < heads; ++h, ++slot) {
          const Mat<Scalar>& p = (*probs)[slot];
          gather(node.grad.data(), n, w, h, dow);
          gather(node.parent_value(0).data(), n, w, h, qw);
          gather(node.parent_value(1).data(), n, w, h, kw);
          gather(node.parent_value(2).data(), n, w, h, vw);
          if (gv) {
            tmp.noalias() = p.transpose() * dow;
            scatter_add(gv->data(), n, w, h, tmp);
          }
          dp.noalias() = dow * vw.transpose();
          const auto rows = (p.array() * dp.array()).rowwise().sum().eval();
          dl = p.array() * (dp.array().colwise() - rows);
          if (gb) {
            Scalar* table = gb->data() + h * nbt;
            for (Index i = 0; i < T; ++i)
              for (Index j = 0; j < T; ++j) table[g.rel_index[static_cast<std::size_t>(i * T + j)]] += dl(i, j);
          }
          if (gq) {
            tmp.noalias() = (dl * kw) * scale;
            scatter_add(gq->data(), n, w, h, tmp);
          }
          if (gk) {
            tmp.noalias() = (dl.transpose() * qw) * scale;
            scatter_add(gk->data(), n, w, h, tmp);
          }
        }
  });
}

}  // namespace ptseg
