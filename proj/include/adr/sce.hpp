// Spatial-Channel joint Expanding block and the intra-model attention
// diversification loss. The block upsamples the last backbone tap by an
// integer scale factor (transposed conv + instance norm + ReLU); the loss
// maximizes the spatial average of the cross-channel top-k attention over the
// expanded map.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adr/attention.hpp"
#include "adr/common.hpp"
#include "adr/layers.hpp"
#include "adr/tensor.hpp"

namespace adr {

struct SCEConfig {
  int scale = 2;  // s; 1 means the expanding path is an identity-shaped deconv
  int topk = 10;  // k
  int kernel = 0;   // 0 -> derived from scale
  int padding = -1; // -1 -> derived from scale
  bool instance_norm = true;
  bool bilinear_init = false;

  // Geometry that guarantees output = s * input exactly: (in-1)*s + k - 2p =
  // s*in requires k - 2p = s.
  int derived_kernel() const {
    if (kernel > 0) return kernel;
    if (scale == 1) return 1;
    return (scale % 2 == 0) ? 2 * scale : 2 * scale - 1;
  }
  int derived_padding() const {
    if (padding >= 0) return padding;
    if (scale == 1) return 0;
    return (derived_kernel() - scale) / 2;
  }

  void validate() const {
    if (scale < 1) throw ConfigError("SCEConfig: scale factor must be >= 1");
    if (topk < 1) throw ConfigError("SCEConfig: topk must be >= 1");
    if (derived_kernel() - 2 * derived_padding() != scale)
      throw ConfigError(format_msg("SCEConfig: kernel ", derived_kernel(), " and padding ",
                                   derived_padding(), " do not give exact x", scale,
                                   " upsampling"));
  }
};

template <typename R>
struct SCEBlock {
  SCEConfig cfg;
  int channels = 0;
  ConvTranspose2d<R> deconv;
  InstanceNorm2d<R> inorm;

  struct Cache {
    Tensor<R> x;       // input
    Tensor<R> pre_in;  // deconv output
    typename InstanceNorm2d<R>::Cache in_cache;
    Tensor<R> pre_relu;
    Tensor<R> expanded;  // relu output
  };

  void init(int block_channels, RandomStream& rs) {
    cfg.validate();
    channels = block_channels;
    if (cfg.topk > channels)
      throw ConfigError(format_msg("SCEBlock: topk=", cfg.topk, " exceeds channel count ",
                                   channels));
    deconv.init(channels, channels, cfg.derived_kernel(), cfg.scale, cfg.derived_padding(), rs);
    if (cfg.bilinear_init) deconv.init_bilinear();
    inorm.init(channels);
  }

  // Test hook: make the deconv an exact identity (requires scale == 1).
  void init_identity() {
    deconv.w.v.fill(R(0));
    for (int c = 0; c < channels; ++c) deconv.w.v.at4(c, c, 0, 0) = R(1);
    deconv.b.v.fill(R(0));
  }

  Tensor<R> forward(const Tensor<R>& x, Cache* cache) const {
    if (x.dim(1) != channels)
      throw ConfigError(format_msg("SCEBlock: input has ", x.dim(1), " channels, block built for ",
                                   channels));
    Tensor<R> pre_in = deconv.forward(x);
    Tensor<R> pre_relu = cfg.instance_norm
                             ? inorm.forward(pre_in, cache ? &cache->in_cache : nullptr)
                             : pre_in;
    Tensor<R> out = relu(pre_relu);
    if (cache) {
      cache->x = x;
      cache->pre_in = std::move(pre_in);
      cache->pre_relu = std::move(pre_relu);
      cache->expanded = out;
    }
    return out;
  }

  // Accumulates deconv/instance-norm gradients; returns dL/dx.
  Tensor<R> backward(Cache& cache, const Tensor<R>& d_expanded) {
    Tensor<R> d_pre_relu = relu_backward(cache.pre_relu, d_expanded);
    Tensor<R> d_pre_in =
        cfg.instance_norm ? inorm.backward(cache.in_cache, d_pre_relu) : std::move(d_pre_relu);
    return deconv.backward(cache.x, d_pre_in);
  }

  void collect(std::vector<NamedParam<R>>& out, const std::string& prefix) {
    deconv.collect(out, prefix + ".deconv");
    if (cfg.instance_norm) inorm.collect(out, prefix + ".inorm");
  }
};

// Per-sample spatial expanding (batch of one under the hood).
template <typename R>
FeatureBlock<R> spatial_expand(const FeatureBlock<R>& x, const SCEBlock<R>& sce) {
  if (x.values.rank() != 3)
    throw ValidationError("spatial_expand: expected a C x H x W feature block");
  Tensor<R> batched({1, x.values.dim(0), x.values.dim(1), x.values.dim(2)}, x.values.vec());
  Tensor<R> out = sce.forward(batched, nullptr);
  Tensor<R> squeezed({out.dim(1), out.dim(2), out.dim(3)}, out.vec());
  return {std::move(squeezed), x.block_index};
}

// L_intra on an already-expanded map: -(1/HW) * sum_p topk_mean(softmax(E))[p].
template <typename R>
R intra_loss_from_expanded(const Tensor<R>& expanded, int k) {
  const int rank = expanded.rank();
  const int N = rank == 4 ? expanded.dim(0) : 1;
  const int C = expanded.dim(rank - 3);
  const int HW = expanded.dim(rank - 2) * expanded.dim(rank - 1);
  if (k < 1 || k > C)
    throw ParameterError(format_msg("intra_loss: k=", k, " outside [1, ", C, "]"));
  const std::size_t per = static_cast<std::size_t>(C) * static_cast<std::size_t>(HW);
  Tensor<R> att({C, HW});
  std::vector<R> pooled(static_cast<std::size_t>(HW));
  R total = R(0);
  for (int n = 0; n < N; ++n) {
    kernels::spatial_softmax(expanded.data() + per * static_cast<std::size_t>(n), C, HW,
                             att.data());
    kernels::topk_mean(att.data(), C, HW, k, pooled.data(), nullptr);
    for (int p = 0; p < HW; ++p) total += pooled[static_cast<std::size_t>(p)];
  }
  return -total / (static_cast<R>(N) * static_cast<R>(HW));
}

// Per-sample L_intra through the full SCE path.
template <typename R>
R intra_loss(const FeatureBlock<R>& x, const SCEBlock<R>& sce, int k) {
  FeatureBlock<R> expanded = spatial_expand(x, sce);
  return intra_loss_from_expanded(expanded.values, k);
}

// Batched training-path version with gradients.
template <typename R>
struct IntraLossCache {
  typename SCEBlock<R>::Cache sce_cache;
  Tensor<R> attention;  // [N, C, sH, sW]
  int k = 0;
};

template <typename R>
R intra_loss_batch(const Tensor<R>& x, const SCEBlock<R>& sce, int k, IntraLossCache<R>& cache) {
  Tensor<R> expanded = sce.forward(x, &cache.sce_cache);
  const int N = expanded.dim(0), C = expanded.dim(1);
  const int HW = expanded.dim(2) * expanded.dim(3);
  if (k < 1 || k > C)
    throw ParameterError(format_msg("intra_loss: k=", k, " outside [1, ", C, "]"));
  cache.k = k;
  cache.attention = Tensor<R>(expanded.shape());
  const std::size_t per = static_cast<std::size_t>(C) * static_cast<std::size_t>(HW);
  R total = R(0);
  std::vector<R> pooled(static_cast<std::size_t>(HW));
  for (int n = 0; n < N; ++n) {
    kernels::spatial_softmax(expanded.data() + per * static_cast<std::size_t>(n), C, HW,
                             cache.attention.data() + per * static_cast<std::size_t>(n));
    kernels::topk_mean(cache.attention.data() + per * static_cast<std::size_t>(n), C, HW, k,
                       pooled.data(), nullptr);
    for (int p = 0; p < HW; ++p) total += pooled[static_cast<std::size_t>(p)];
  }
  return -total / (static_cast<R>(N) * static_cast<R>(HW));
}

// d(scale * L_intra)/dx; SCE parameter gradients are accumulated in `sce`.
template <typename R>
Tensor<R> intra_loss_backward(SCEBlock<R>& sce, IntraLossCache<R>& cache, R scale) {
  const Tensor<R>& att = cache.attention;
  const int N = att.dim(0), C = att.dim(1);
  const int HW = att.dim(2) * att.dim(3);
  const std::size_t per = static_cast<std::size_t>(C) * static_cast<std::size_t>(HW);
  // dL/d(pooled[p]) = -scale / (N * HW) for every pixel of every sample.
  const R g = -scale / (static_cast<R>(N) * static_cast<R>(HW));
  Tensor<R> d_expanded(att.shape());
  std::vector<R> dpool(static_cast<std::size_t>(HW), g);
  Tensor<R> datt({C, HW});
  for (int n = 0; n < N; ++n) {
    datt.fill(R(0));
    const R* a = att.data() + per * static_cast<std::size_t>(n);
    kernels::topk_mean_backward(a, dpool.data(), C, HW, cache.k, datt.data());
    kernels::spatial_softmax_backward(a, datt.data(), C, HW,
                                      d_expanded.data() + per * static_cast<std::size_t>(n));
  }
  return sce.backward(cache.sce_cache, d_expanded);
}

}  // namespace adr
