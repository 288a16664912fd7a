// Batched NCHW layer primitives with explicit forward caches and hand-written
// backward passes. Parallel slices are always whole output channels or whole
// (sample, channel) planes, so accumulation order is fixed and results do not
// depend on the worker count.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "adr/common.hpp"
#include "adr/parallel.hpp"
#include "adr/rng.hpp"
#include "adr/tensor.hpp"

namespace adr {

template <typename R>
struct Param {
  Tensor<R> v;  // value
  Tensor<R> g;  // gradient accumulator, same shape

  void init_shape(std::vector<int> shape) {
    v = Tensor<R>(shape);
    g = Tensor<R>(std::move(shape));
  }
  void zero_grad() { g.fill(R(0)); }
};

template <typename R>
struct NamedParam {
  std::string name;
  Param<R>* p;
};

// Non-trainable state that still belongs in checkpoints (BN running stats).
template <typename R>
struct NamedBuffer {
  std::string name;
  Tensor<R>* t;
};

enum class Mode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Conv2d: stride 1, square kernel, symmetric zero padding.
// ---------------------------------------------------------------------------
template <typename R>
struct Conv2d {
  int in_c = 0, out_c = 0, ksize = 3, pad = 1;
  Param<R> w;  // [out_c, in_c, k, k]
  Param<R> b;  // [out_c]

  void init(int in_channels, int out_channels, int k, int padding, RandomStream& rs) {
    in_c = in_channels;
    out_c = out_channels;
    ksize = k;
    pad = padding;
    w.init_shape({out_c, in_c, k, k});
    b.init_shape({out_c});
    const R std = std::sqrt(R(2) / static_cast<R>(in_c * k * k));
    for (std::size_t i = 0; i < w.v.size(); ++i) w.v[i] = static_cast<R>(rs.normal()) * std;
  }

  Tensor<R> forward(const Tensor<R>& x) const {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int OH = H + 2 * pad - ksize + 1, OW = W + 2 * pad - ksize + 1;
    Tensor<R> y({N, out_c, OH, OW});
    parallel_for(N * out_c, [&](int job) {
      const int n = job / out_c, oc = job % out_c;
      R* yp = y.data() + y.idx4(n, oc, 0, 0);
      for (int i = 0; i < OH * OW; ++i) yp[i] = b.v[static_cast<std::size_t>(oc)];
      for (int ic = 0; ic < in_c; ++ic) {
        const R* xp = x.data() + x.idx4(n, ic, 0, 0);
        const R* wp = w.v.data() + w.v.idx4(oc, ic, 0, 0);
        for (int kh = 0; kh < ksize; ++kh)
          for (int kw = 0; kw < ksize; ++kw) {
            const R wv = wp[kh * ksize + kw];
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh + kh - pad;
              if (ih < 0 || ih >= H) continue;
              const int wlo = std::max(0, pad - kw);
              const int whi = std::min(OW, W + pad - kw);
              const R* xrow = xp + static_cast<std::size_t>(ih) * W + (wlo + kw - pad);
              R* yrow = yp + static_cast<std::size_t>(oh) * OW + wlo;
              for (int ow = 0; ow < whi - wlo; ++ow) yrow[ow] += wv * xrow[ow];
            }
          }
      }
    });
    return y;
  }

  // Accumulates parameter gradients; returns dL/dx. Each output row pass
  // handles all kernel taps at once so the dy/x planes stream through cache a
  // single time.
  Tensor<R> backward(const Tensor<R>& x, const Tensor<R>& dy) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int OH = dy.dim(2), OW = dy.dim(3);
    Tensor<R> dx(x.shape());

    parallel_for(N * in_c, [&](int job) {
      const int n = job / in_c, ic = job % in_c;
      R* dxp = dx.data() + dx.idx4(n, ic, 0, 0);
      for (int oc = 0; oc < out_c; ++oc) {
        const R* dyp = dy.data() + dy.idx4(n, oc, 0, 0);
        const R* wp = w.v.data() + w.v.idx4(oc, ic, 0, 0);
        for (int oh = 0; oh < OH; ++oh) {
          const R* dyrow = dyp + static_cast<std::size_t>(oh) * OW;
          for (int kh = 0; kh < ksize; ++kh) {
            const int ih = oh + kh - pad;
            if (ih < 0 || ih >= H) continue;
            R* dxrow = dxp + static_cast<std::size_t>(ih) * W;
            for (int kw = 0; kw < ksize; ++kw) {
              const R wv = wp[kh * ksize + kw];
              const int wlo = std::max(0, pad - kw);
              const int whi = std::min(OW, W + pad - kw);
              R* dst = dxrow + (wlo + kw - pad);
              const R* src = dyrow + wlo;
              for (int ow = 0; ow < whi - wlo; ++ow) dst[ow] += wv * src[ow];
            }
          }
        }
      }
    });

    parallel_for(out_c, [&](int oc) {
      R dbsum = R(0);
      for (int n = 0; n < N; ++n) {
        const R* dyp = dy.data() + dy.idx4(n, oc, 0, 0);
        for (int i = 0; i < OH * OW; ++i) dbsum += dyp[i];
      }
      b.g[static_cast<std::size_t>(oc)] += dbsum;
      std::vector<R> acc(static_cast<std::size_t>(ksize) * ksize);
      for (int ic = 0; ic < in_c; ++ic) {
        std::fill(acc.begin(), acc.end(), R(0));
        for (int n = 0; n < N; ++n) {
          const R* dyp = dy.data() + dy.idx4(n, oc, 0, 0);
          const R* xp = x.data() + x.idx4(n, ic, 0, 0);
          for (int oh = 0; oh < OH; ++oh) {
            const R* dyrow = dyp + static_cast<std::size_t>(oh) * OW;
            for (int kh = 0; kh < ksize; ++kh) {
              const int ih = oh + kh - pad;
              if (ih < 0 || ih >= H) continue;
              const R* xrow = xp + static_cast<std::size_t>(ih) * W;
              for (int kw = 0; kw < ksize; ++kw) {
                const int wlo = std::max(0, pad - kw);
                const int whi = std::min(OW, W + pad - kw);
                const R* xs = xrow + (wlo + kw - pad);
                const R* ds = dyrow + wlo;
                R sum = R(0);
                for (int ow = 0; ow < whi - wlo; ++ow) sum += xs[ow] * ds[ow];
                acc[static_cast<std::size_t>(kh) * ksize + kw] += sum;
              }
            }
          }
        }
        R* gw = w.g.data() + w.g.idx4(oc, ic, 0, 0);
        for (int t = 0; t < ksize * ksize; ++t) gw[t] += acc[static_cast<std::size_t>(t)];
      }
    });
    return dx;
  }

  void collect(std::vector<NamedParam<R>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

// ---------------------------------------------------------------------------
// ConvTranspose2d: weight [in_c, out_c, k, k], output (H-1)*s + k - 2p.
// ---------------------------------------------------------------------------
template <typename R>
struct ConvTranspose2d {
  int in_c = 0, out_c = 0, ksize = 2, stride = 2, pad = 0;
  Param<R> w;
  Param<R> b;

  void init(int in_channels, int out_channels, int k, int s, int padding, RandomStream& rs) {
    in_c = in_channels;
    out_c = out_channels;
    ksize = k;
    stride = s;
    pad = padding;
    w.init_shape({in_c, out_c, k, k});
    b.init_shape({out_c});
    const R std = std::sqrt(R(2) / static_cast<R>(in_c * k * k));
    for (std::size_t i = 0; i < w.v.size(); ++i) w.v[i] = static_cast<R>(rs.normal()) * std;
  }

  // Channel-preserving bilinear interpolation kernel; off-diagonal channel
  // weights stay zero.
  void init_bilinear() {
    w.v.fill(R(0));
    const R f = static_cast<R>((ksize + 1) / 2);
    const R center = (ksize % 2 == 1) ? f - 1 : f - R(0.5);
    const int cc = std::min(in_c, out_c);
    for (int c = 0; c < cc; ++c)
      for (int kh = 0; kh < ksize; ++kh)
        for (int kw = 0; kw < ksize; ++kw)
          w.v.at4(c, c, kh, kw) = (R(1) - std::fabs(kh - center) / f) *
                                  (R(1) - std::fabs(kw - center) / f);
  }

  int out_size(int in) const { return (in - 1) * stride + ksize - 2 * pad; }

  Tensor<R> forward(const Tensor<R>& x) const {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int OH = out_size(H), OW = out_size(W);
    Tensor<R> y({N, out_c, OH, OW});
    parallel_for(N * out_c, [&](int job) {
      const int n = job / out_c, oc = job % out_c;
      R* yp = y.data() + y.idx4(n, oc, 0, 0);
      for (int i = 0; i < OH * OW; ++i) yp[i] = b.v[static_cast<std::size_t>(oc)];
      for (int ic = 0; ic < in_c; ++ic) {
        const R* xp = x.data() + x.idx4(n, ic, 0, 0);
        const R* wp = w.v.data() + w.v.idx4(ic, oc, 0, 0);
        for (int h = 0; h < H; ++h)
          for (int wcol = 0; wcol < W; ++wcol) {
            const R xv = xp[static_cast<std::size_t>(h) * W + wcol];
            for (int kh = 0; kh < ksize; ++kh) {
              const int oh = h * stride + kh - pad;
              if (oh < 0 || oh >= OH) continue;
              for (int kw = 0; kw < ksize; ++kw) {
                const int ow = wcol * stride + kw - pad;
                if (ow < 0 || ow >= OW) continue;
                yp[static_cast<std::size_t>(oh) * OW + ow] += xv * wp[kh * ksize + kw];
              }
            }
          }
      }
    });
    return y;
  }

  Tensor<R> backward(const Tensor<R>& x, const Tensor<R>& dy) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int OH = dy.dim(2), OW = dy.dim(3);
    Tensor<R> dx(x.shape());

    parallel_for(N * in_c, [&](int job) {
      const int n = job / in_c, ic = job % in_c;
      R* dxp = dx.data() + dx.idx4(n, ic, 0, 0);
      for (int oc = 0; oc < out_c; ++oc) {
        const R* dyp = dy.data() + dy.idx4(n, oc, 0, 0);
        const R* wp = w.v.data() + w.v.idx4(ic, oc, 0, 0);
        for (int h = 0; h < H; ++h)
          for (int wcol = 0; wcol < W; ++wcol) {
            R acc = R(0);
            for (int kh = 0; kh < ksize; ++kh) {
              const int oh = h * stride + kh - pad;
              if (oh < 0 || oh >= OH) continue;
              for (int kw = 0; kw < ksize; ++kw) {
                const int ow = wcol * stride + kw - pad;
                if (ow < 0 || ow >= OW) continue;
                acc += dyp[static_cast<std::size_t>(oh) * OW + ow] * wp[kh * ksize + kw];
              }
            }
            dxp[static_cast<std::size_t>(h) * W + wcol] += acc;
          }
      }
    });

    parallel_for(in_c * out_c, [&](int job) {
      const int ic = job / out_c, oc = job % out_c;
      R* gw = w.g.data() + w.g.idx4(ic, oc, 0, 0);
      for (int kh = 0; kh < ksize; ++kh)
        for (int kw = 0; kw < ksize; ++kw) {
          R acc = R(0);
          for (int n = 0; n < N; ++n) {
            const R* xp = x.data() + x.idx4(n, ic, 0, 0);
            const R* dyp = dy.data() + dy.idx4(n, oc, 0, 0);
            for (int h = 0; h < H; ++h) {
              const int oh = h * stride + kh - pad;
              if (oh < 0 || oh >= OH) continue;
              for (int wcol = 0; wcol < W; ++wcol) {
                const int ow = wcol * stride + kw - pad;
                if (ow < 0 || ow >= OW) continue;
                acc += xp[static_cast<std::size_t>(h) * W + wcol] *
                       dyp[static_cast<std::size_t>(oh) * OW + ow];
              }
            }
          }
          gw[kh * ksize + kw] += acc;
        }
    });

    parallel_for(out_c, [&](int oc) {
      R acc = R(0);
      for (int n = 0; n < N; ++n) {
        const R* dyp = dy.data() + dy.idx4(n, oc, 0, 0);
        for (int i = 0; i < OH * OW; ++i) acc += dyp[i];
      }
      b.g[static_cast<std::size_t>(oc)] += acc;
    });
    return dx;
  }

  void collect(std::vector<NamedParam<R>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

// ---------------------------------------------------------------------------
// BatchNorm2d: batch statistics in train mode, running statistics in eval.
// ---------------------------------------------------------------------------
template <typename R>
struct BatchNorm2d {
  int channels = 0;
  R eps = R(1e-5);
  R momentum = R(0.1);
  Param<R> gamma, beta;
  Tensor<R> running_mean, running_var;

  struct Cache {
    Tensor<R> xhat;     // normalized input
    std::vector<R> invstd;
    Mode mode = Mode::kTrain;
  };

  void init(int c) {
    channels = c;
    gamma.init_shape({c});
    beta.init_shape({c});
    gamma.v.fill(R(1));
    running_mean = Tensor<R>({c});
    running_var = Tensor<R>::full({c}, R(1));
  }

  Tensor<R> forward(const Tensor<R>& x, Mode mode, Cache* cache) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int HW = H * W;
    const std::size_t plane = static_cast<std::size_t>(HW);
    Tensor<R> y(x.shape());
    if (cache) {
      cache->xhat = Tensor<R>(x.shape());
      cache->invstd.assign(static_cast<std::size_t>(C), R(0));
      cache->mode = mode;
    }
    const R m = static_cast<R>(N * HW);
    parallel_for(C, [&](int c) {
      R mean, invstd;
      if (mode == Mode::kTrain) {
        R sum = R(0);
        for (int n = 0; n < N; ++n) {
          const R* xp = x.data() + x.idx4(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) sum += xp[i];
        }
        mean = sum / m;
        R ssq = R(0);
        for (int n = 0; n < N; ++n) {
          const R* xp = x.data() + x.idx4(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            const R d = xp[i] - mean;
            ssq += d * d;
          }
        }
        const R var = ssq / m;
        invstd = R(1) / std::sqrt(var + eps);
        running_mean[static_cast<std::size_t>(c)] =
            (R(1) - momentum) * running_mean[static_cast<std::size_t>(c)] + momentum * mean;
        const R unbiased = m > R(1) ? ssq / (m - R(1)) : var;
        running_var[static_cast<std::size_t>(c)] =
            (R(1) - momentum) * running_var[static_cast<std::size_t>(c)] + momentum * unbiased;
      } else {
        mean = running_mean[static_cast<std::size_t>(c)];
        invstd = R(1) / std::sqrt(running_var[static_cast<std::size_t>(c)] + eps);
      }
      const R g = gamma.v[static_cast<std::size_t>(c)];
      const R bt = beta.v[static_cast<std::size_t>(c)];
      for (int n = 0; n < N; ++n) {
        const R* xp = x.data() + x.idx4(n, c, 0, 0);
        R* yp = y.data() + y.idx4(n, c, 0, 0);
        R* hp = cache ? cache->xhat.data() + cache->xhat.idx4(n, c, 0, 0) : nullptr;
        for (std::size_t i = 0; i < plane; ++i) {
          const R xh = (xp[i] - mean) * invstd;
          if (hp) hp[i] = xh;
          yp[i] = g * xh + bt;
        }
      }
      if (cache) cache->invstd[static_cast<std::size_t>(c)] = invstd;
    });
    return y;
  }

  Tensor<R> backward(const Cache& cache, const Tensor<R>& dy) {
    const int N = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H * W);
    const R m = static_cast<R>(N) * static_cast<R>(H * W);
    Tensor<R> dx(dy.shape());
    parallel_for(C, [&](int c) {
      const R g = gamma.v[static_cast<std::size_t>(c)];
      const R invstd = cache.invstd[static_cast<std::size_t>(c)];
      R sum_dy = R(0), sum_dy_xhat = R(0);
      for (int n = 0; n < N; ++n) {
        const R* dyp = dy.data() + dy.idx4(n, c, 0, 0);
        const R* hp = cache.xhat.data() + cache.xhat.idx4(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += dyp[i];
          sum_dy_xhat += dyp[i] * hp[i];
        }
      }
      beta.g[static_cast<std::size_t>(c)] += sum_dy;
      gamma.g[static_cast<std::size_t>(c)] += sum_dy_xhat;
      if (cache.mode == Mode::kTrain) {
        const R k1 = sum_dy / m, k2 = sum_dy_xhat / m;
        for (int n = 0; n < N; ++n) {
          const R* dyp = dy.data() + dy.idx4(n, c, 0, 0);
          const R* hp = cache.xhat.data() + cache.xhat.idx4(n, c, 0, 0);
          R* dxp = dx.data() + dx.idx4(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i)
            dxp[i] += g * invstd * (dyp[i] - k1 - hp[i] * k2);
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const R* dyp = dy.data() + dy.idx4(n, c, 0, 0);
          R* dxp = dx.data() + dx.idx4(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) dxp[i] += g * invstd * dyp[i];
        }
      }
    });
    return dx;
  }

  void collect(std::vector<NamedParam<R>>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
  void collect_buffers(std::vector<NamedBuffer<R>>& out, const std::string& prefix) {
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
  }
};

// ---------------------------------------------------------------------------
// InstanceNorm2d: per-sample, per-channel statistics, learnable affine.
// ---------------------------------------------------------------------------
template <typename R>
struct InstanceNorm2d {
  int channels = 0;
  R eps = R(1e-5);
  Param<R> gamma, beta;

  struct Cache {
    Tensor<R> xhat;
    std::vector<R> invstd;  // N*C
  };

  void init(int c) {
    channels = c;
    gamma.init_shape({c});
    beta.init_shape({c});
    gamma.v.fill(R(1));
  }

  Tensor<R> forward(const Tensor<R>& x, Cache* cache) const {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H * W);
    const R m = static_cast<R>(H * W);
    Tensor<R> y(x.shape());
    if (cache) {
      cache->xhat = Tensor<R>(x.shape());
      cache->invstd.assign(static_cast<std::size_t>(N * C), R(0));
    }
    parallel_for(N * C, [&](int job) {
      const int n = job / C, c = job % C;
      const R* xp = x.data() + x.idx4(n, c, 0, 0);
      R sum = R(0);
      for (std::size_t i = 0; i < plane; ++i) sum += xp[i];
      const R mean = sum / m;
      R ssq = R(0);
      for (std::size_t i = 0; i < plane; ++i) {
        const R d = xp[i] - mean;
        ssq += d * d;
      }
      const R invstd = R(1) / std::sqrt(ssq / m + eps);
      const R g = gamma.v[static_cast<std::size_t>(c)];
      const R bt = beta.v[static_cast<std::size_t>(c)];
      R* yp = y.data() + y.idx4(n, c, 0, 0);
      R* hp = cache ? cache->xhat.data() + cache->xhat.idx4(n, c, 0, 0) : nullptr;
      for (std::size_t i = 0; i < plane; ++i) {
        const R xh = (xp[i] - mean) * invstd;
        if (hp) hp[i] = xh;
        yp[i] = g * xh + bt;
      }
      if (cache) cache->invstd[static_cast<std::size_t>(job)] = invstd;
    });
    return y;
  }

  Tensor<R> backward(const Cache& cache, const Tensor<R>& dy) {
    const int N = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H * W);
    const R m = static_cast<R>(H * W);
    Tensor<R> dx(dy.shape());
    parallel_for(C, [&](int c) {
      const R g = gamma.v[static_cast<std::size_t>(c)];
      R dg = R(0), db = R(0);
      for (int n = 0; n < N; ++n) {
        const R* dyp = dy.data() + dy.idx4(n, c, 0, 0);
        const R* hp = cache.xhat.data() + cache.xhat.idx4(n, c, 0, 0);
        const R invstd = cache.invstd[static_cast<std::size_t>(n) * C + static_cast<std::size_t>(c)];
        R sum_dy = R(0), sum_dy_xhat = R(0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += dyp[i];
          sum_dy_xhat += dyp[i] * hp[i];
        }
        db += sum_dy;
        dg += sum_dy_xhat;
        const R k1 = sum_dy / m, k2 = sum_dy_xhat / m;
        R* dxp = dx.data() + dx.idx4(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i)
          dxp[i] += g * invstd * (dyp[i] - k1 - hp[i] * k2);
      }
      gamma.g[static_cast<std::size_t>(c)] += dg;
      beta.g[static_cast<std::size_t>(c)] += db;
    });
    return dx;
  }

  void collect(std::vector<NamedParam<R>>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

// ---------------------------------------------------------------------------
// Stateless pieces.
// ---------------------------------------------------------------------------
template <typename R>
Tensor<R> relu(const Tensor<R>& x) {
  Tensor<R> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > R(0) ? x[i] : R(0);
  return y;
}

// Mask comes from the forward input.
template <typename R>
Tensor<R> relu_backward(const Tensor<R>& x, const Tensor<R>& dy) {
  Tensor<R> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > R(0) ? dy[i] : R(0);
  return dx;
}

// 2x2 max pooling, stride 2. Ties keep the first position in scan order.
template <typename R>
struct MaxPool2d {
  struct Cache {
    std::vector<int> argmax;  // flat input offset per output element
    std::vector<int> in_shape;
  };

  static Tensor<R> forward(const Tensor<R>& x, Cache* cache) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = H / 2, OW = W / 2;
    Tensor<R> y({N, C, OH, OW});
    if (cache) {
      cache->argmax.assign(y.size(), 0);
      cache->in_shape = x.shape();
    }
    parallel_for(N * C, [&](int job) {
      const int n = job / C, c = job % C;
      const R* xp = x.data() + x.idx4(n, c, 0, 0);
      R* yp = y.data() + y.idx4(n, c, 0, 0);
      int* am = cache ? cache->argmax.data() + y.idx4(n, c, 0, 0) : nullptr;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          int best_off = (2 * oh) * W + 2 * ow;
          R best = xp[best_off];
          const int offs[3] = {(2 * oh) * W + 2 * ow + 1, (2 * oh + 1) * W + 2 * ow,
                               (2 * oh + 1) * W + 2 * ow + 1};
          for (int t = 0; t < 3; ++t)
            if (xp[offs[t]] > best) {
              best = xp[offs[t]];
              best_off = offs[t];
            }
          yp[static_cast<std::size_t>(oh) * OW + ow] = best;
          if (am) am[static_cast<std::size_t>(oh) * OW + ow] = best_off;
        }
    });
    return y;
  }

  static Tensor<R> backward(const Cache& cache, const Tensor<R>& dy) {
    Tensor<R> dx(cache.in_shape);
    const int N = dy.dim(0), C = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    parallel_for(N * C, [&](int job) {
      const int n = job / C, c = job % C;
      const R* dyp = dy.data() + dy.idx4(n, c, 0, 0);
      R* dxp = dx.data() + dx.idx4(n, c, 0, 0);
      const int* am = cache.argmax.data() + dy.idx4(n, c, 0, 0);
      for (int i = 0; i < OH * OW; ++i) dxp[am[i]] += dyp[i];
    });
    return dx;
  }
};

// [N, C, H, W] -> [N, C]
template <typename R>
Tensor<R> global_avg_pool(const Tensor<R>& x) {
  const int N = x.dim(0), C = x.dim(1);
  const R inv = R(1) / static_cast<R>(x.dim(2) * x.dim(3));
  Tensor<R> y({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const R* xp = x.data() + x.idx4(n, c, 0, 0);
      R s = R(0);
      for (int i = 0; i < x.dim(2) * x.dim(3); ++i) s += xp[i];
      y.at2(n, c) = s * inv;
    }
  return y;
}

template <typename R>
Tensor<R> global_avg_pool_backward(const std::vector<int>& in_shape, const Tensor<R>& dy) {
  Tensor<R> dx(in_shape);
  const int N = in_shape[0], C = in_shape[1];
  const int HW = in_shape[2] * in_shape[3];
  const R inv = R(1) / static_cast<R>(HW);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const R g = dy.at2(n, c) * inv;
      R* dxp = dx.data() + dx.idx4(n, c, 0, 0);
      for (int i = 0; i < HW; ++i) dxp[i] += g;
    }
  return dx;
}

template <typename R>
struct Linear {
  int in_f = 0, out_f = 0;
  Param<R> w;  // [out, in]
  Param<R> b;  // [out]

  void init(int in_features, int out_features, RandomStream& rs, R weight_scale = R(1)) {
    in_f = in_features;
    out_f = out_features;
    w.init_shape({out_f, in_f});
    b.init_shape({out_f});
    const R std = weight_scale * std::sqrt(R(1) / static_cast<R>(in_f));
    for (std::size_t i = 0; i < w.v.size(); ++i) w.v[i] = static_cast<R>(rs.normal()) * std;
  }

  Tensor<R> forward(const Tensor<R>& x) const {
    const int N = x.dim(0);
    Tensor<R> y({N, out_f});
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < out_f; ++o) {
        R acc = b.v[static_cast<std::size_t>(o)];
        const R* xp = x.data() + x.idx2(n, 0);
        const R* wp = w.v.data() + w.v.idx2(o, 0);
        for (int i = 0; i < in_f; ++i) acc += wp[i] * xp[i];
        y.at2(n, o) = acc;
      }
    return y;
  }

  Tensor<R> backward(const Tensor<R>& x, const Tensor<R>& dy) {
    const int N = x.dim(0);
    Tensor<R> dx(x.shape());
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < out_f; ++o) {
        const R g = dy.at2(n, o);
        b.g[static_cast<std::size_t>(o)] += g;
        const R* xp = x.data() + x.idx2(n, 0);
        R* gw = w.g.data() + w.g.idx2(o, 0);
        R* dxp = dx.data() + dx.idx2(n, 0);
        const R* wp = w.v.data() + w.v.idx2(o, 0);
        for (int i = 0; i < in_f; ++i) {
          gw[i] += g * xp[i];
          dxp[i] += g * wp[i];
        }
      }
    return dx;
  }

  void collect(std::vector<NamedParam<R>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

// Softmax cross entropy over logits [N, Z]; mean over the batch.
template <typename R>
struct CrossEntropy {
  // Returns loss; fills probs [N, Z] when requested.
  static R forward(const Tensor<R>& logits, const std::vector<int>& labels, Tensor<R>* probs) {
    const int N = logits.dim(0), Z = logits.dim(1);
    R total = R(0);
    if (probs) *probs = Tensor<R>(logits.shape());
    for (int n = 0; n < N; ++n) {
      const R* lp = logits.data() + logits.idx2(n, 0);
      R m = lp[0];
      for (int z = 1; z < Z; ++z) m = std::max(m, lp[z]);
      R sum = R(0);
      for (int z = 0; z < Z; ++z) sum += std::exp(lp[z] - m);
      const R lse = m + std::log(sum);
      total += lse - lp[labels[static_cast<std::size_t>(n)]];
      if (probs) {
        R* pp = probs->data() + probs->idx2(n, 0);
        for (int z = 0; z < Z; ++z) pp[z] = std::exp(lp[z] - lse);
      }
    }
    return total / static_cast<R>(N);
  }

  // dL/dlogits for the mean-reduced loss, scaled by `scale`.
  static Tensor<R> backward(const Tensor<R>& probs, const std::vector<int>& labels, R scale) {
    const int N = probs.dim(0), Z = probs.dim(1);
    Tensor<R> d(probs.shape());
    const R inv = scale / static_cast<R>(N);
    for (int n = 0; n < N; ++n) {
      const R* pp = probs.data() + probs.idx2(n, 0);
      R* dp = d.data() + d.idx2(n, 0);
      for (int z = 0; z < Z; ++z) dp[z] = pp[z] * inv;
      dp[labels[static_cast<std::size_t>(n)]] -= inv;
    }
    return d;
  }
};

// Argmax per row; ties break toward the lowest class index.
template <typename R>
std::vector<int> argmax_rows(const Tensor<R>& logits) {
  const int N = logits.dim(0), Z = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    const R* lp = logits.data() + logits.idx2(n, 0);
    int best = 0;
    for (int z = 1; z < Z; ++z)
      if (lp[z] > lp[best]) best = z;
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

}  // namespace adr
