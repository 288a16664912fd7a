// Spatial attention primitives: in-channel spatial softmax, pixel-wise
// cross-channel maximization / top-k selection, and pixel-wise cross-model
// maximization. All operators are pure functions; the *_backward companions
// implement the vector-Jacobian products consumed by the losses.
//
// Per-sample contracts operate on C x H x W feature blocks. Batched training
// code calls the raw kernels directly over a leading batch axis.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "adr/common.hpp"
#include "adr/tensor.hpp"

namespace adr {

// One sample's feature maps from one backbone block (C x H x W).
template <typename R>
struct FeatureBlock {
  Tensor<R> values;
  int block_index = 1;
};

// Per-channel spatially normalized attention; each channel is a probability
// distribution over the H*W spatial positions.
template <typename R>
struct InChannelAttention {
  Tensor<R> values;  // C x H x W
};

// Single H x W attention map.
template <typename R>
struct SpatialMap {
  Tensor<R> values;  // H x W
};

namespace kernels {

// Spatial softmax over HW positions for each of C channels, stabilized by
// per-channel max subtraction.
template <typename R>
void spatial_softmax(const R* x, int C, int HW, R* out) {
  for (int c = 0; c < C; ++c) {
    const R* xc = x + static_cast<std::size_t>(c) * HW;
    R* oc = out + static_cast<std::size_t>(c) * HW;
    R m = xc[0];
    for (int p = 1; p < HW; ++p) m = std::max(m, xc[p]);
    R sum = R(0);
    for (int p = 0; p < HW; ++p) {
      oc[p] = std::exp(xc[p] - m);
      sum += oc[p];
    }
    const R inv = R(1) / sum;
    for (int p = 0; p < HW; ++p) oc[p] *= inv;
  }
}

// dL/dx given a = softmax(x) and dL/da: dx_c = a_c * (dy_c - <dy_c, a_c>).
template <typename R>
void spatial_softmax_backward(const R* a, const R* dy, int C, int HW, R* dx) {
  for (int c = 0; c < C; ++c) {
    const R* ac = a + static_cast<std::size_t>(c) * HW;
    const R* gc = dy + static_cast<std::size_t>(c) * HW;
    R* xc = dx + static_cast<std::size_t>(c) * HW;
    R dot = R(0);
    for (int p = 0; p < HW; ++p) dot += ac[p] * gc[p];
    for (int p = 0; p < HW; ++p) xc[p] += ac[p] * (gc[p] - dot);
  }
}

// out[p] = max over channels; ties keep the lowest channel index.
template <typename R>
void cross_channel_max(const R* a, int C, int HW, R* out) {
  for (int p = 0; p < HW; ++p) out[p] = a[p];
  for (int c = 1; c < C; ++c) {
    const R* ac = a + static_cast<std::size_t>(c) * HW;
    for (int p = 0; p < HW; ++p) out[p] = std::max(out[p], ac[p]);
  }
}

template <typename R>
void cross_channel_max_backward(const R* a, const R* dy, int C, int HW, R* dx) {
  for (int p = 0; p < HW; ++p) {
    int arg = 0;
    R best = a[p];
    for (int c = 1; c < C; ++c) {
      const R v = a[static_cast<std::size_t>(c) * HW + p];
      if (v > best) {
        best = v;
        arg = c;
      }
    }
    dx[static_cast<std::size_t>(arg) * HW + p] += dy[p];
  }
}

// out[p] = mean of the k largest values among {a[c][p] : c}. Selection is by
// value; ties at the boundary admit the lowest channel indices first.
template <typename R>
void topk_mean(const R* a, int C, int HW, int k, R* out, int* sel /*HW*k or null*/) {
  std::vector<int> idx(static_cast<std::size_t>(C));
  for (int p = 0; p < HW; ++p) {
    for (int c = 0; c < C; ++c) idx[static_cast<std::size_t>(c)] = c;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int i, int j) {
      const R vi = a[static_cast<std::size_t>(i) * HW + p];
      const R vj = a[static_cast<std::size_t>(j) * HW + p];
      if (vi != vj) return vi > vj;
      return i < j;
    });
    R sum = R(0);
    for (int r = 0; r < k; ++r) {
      sum += a[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * HW + p];
      if (sel) sel[static_cast<std::size_t>(p) * k + r] = idx[static_cast<std::size_t>(r)];
    }
    out[p] = sum / static_cast<R>(k);
  }
}

// Routes dy[p]/k to each selected channel (recomputes the selection).
template <typename R>
void topk_mean_backward(const R* a, const R* dy, int C, int HW, int k, R* dx) {
  std::vector<int> idx(static_cast<std::size_t>(C));
  for (int p = 0; p < HW; ++p) {
    for (int c = 0; c < C; ++c) idx[static_cast<std::size_t>(c)] = c;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int i, int j) {
      const R vi = a[static_cast<std::size_t>(i) * HW + p];
      const R vj = a[static_cast<std::size_t>(j) * HW + p];
      if (vi != vj) return vi > vj;
      return i < j;
    });
    const R g = dy[p] / static_cast<R>(k);
    for (int r = 0; r < k; ++r)
      dx[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * HW + p] += g;
  }
}

}  // namespace kernels

// --- Per-sample typed operators ---------------------------------------------

template <typename R>
void require_finite(const Tensor<R>& t, const char* op) {
  const std::ptrdiff_t bad = t.first_non_finite();
  if (bad < 0) return;
  // Unflatten for the error message.
  std::size_t rem = static_cast<std::size_t>(bad);
  std::vector<int> coord(static_cast<std::size_t>(t.rank()));
  for (int d = t.rank() - 1; d >= 0; --d) {
    coord[static_cast<std::size_t>(d)] = static_cast<int>(rem % static_cast<std::size_t>(t.dim(d)));
    rem /= static_cast<std::size_t>(t.dim(d));
  }
  std::string where = "(";
  for (std::size_t i = 0; i < coord.size(); ++i) {
    if (i) where += ",";
    where += std::to_string(coord[i]);
  }
  where += ")";
  throw ValidationError(format_msg(op, ": non-finite input at index ", where));
}

template <typename R>
InChannelAttention<R> spatial_softmax(const FeatureBlock<R>& x) {
  if (x.values.rank() != 3)
    throw ValidationError("spatial_softmax: expected a C x H x W feature block");
  require_finite(x.values, "spatial_softmax");
  const int C = x.values.dim(0);
  const int HW = x.values.dim(1) * x.values.dim(2);
  InChannelAttention<R> out{Tensor<R>(x.values.shape())};
  kernels::spatial_softmax(x.values.data(), C, HW, out.values.data());
  return out;
}

template <typename R>
SpatialMap<R> cross_channel_max(const InChannelAttention<R>& a) {
  if (a.values.rank() != 3)
    throw ValidationError("cross_channel_max: expected a C x H x W attention tensor");
  const int C = a.values.dim(0);
  const int H = a.values.dim(1);
  const int W = a.values.dim(2);
  SpatialMap<R> out{Tensor<R>({H, W})};
  kernels::cross_channel_max(a.values.data(), C, H * W, out.values.data());
  return out;
}

template <typename R>
SpatialMap<R> topk_mean(const InChannelAttention<R>& a, int k) {
  if (a.values.rank() != 3)
    throw ValidationError("topk_mean: expected a C x H x W attention tensor");
  const int C = a.values.dim(0);
  if (k < 1 || k > C)
    throw ParameterError(format_msg("topk_mean: k=", k, " outside [1, ", C, "]"));
  const int H = a.values.dim(1);
  const int W = a.values.dim(2);
  SpatialMap<R> out{Tensor<R>({H, W})};
  kernels::topk_mean(a.values.data(), C, H * W, k, out.values.data(), nullptr);
  return out;
}

// Elementwise maximum across a group of models' maps. An empty group is a
// legal state signalled by an empty optional; the caller decides what it
// means (see the divide/assemble pipeline).
template <typename R>
std::optional<SpatialMap<R>> cross_model_max(const std::vector<SpatialMap<R>>& maps) {
  if (maps.empty()) return std::nullopt;
  const auto& shape = maps.front().values.shape();
  for (std::size_t j = 1; j < maps.size(); ++j)
    if (maps[j].values.shape() != shape)
      throw ValidationError(format_msg("cross_model_max: map ", j, " has shape ",
                                       shape_str(maps[j].values), ", expected ",
                                       shape_str(maps.front().values)));
  SpatialMap<R> out{maps.front().values};
  for (std::size_t j = 1; j < maps.size(); ++j)
    for (std::size_t i = 0; i < out.values.size(); ++i)
      out.values[i] = std::max(out.values[i], maps[j].values[i]);
  return out;
}

}  // namespace adr
