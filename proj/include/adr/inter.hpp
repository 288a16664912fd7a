// Inter-model attention diversification: per-block cross-channel attention,
// the divide rule on prediction correctness, cross-model assembly of
// task-related and domain-related targets, and the pull/push distance losses
// against the aggregated model. Assembled targets are constants: no gradient
// ever flows into the maps that built them.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "adr/attention.hpp"
#include "adr/common.hpp"
#include "adr/tensor.hpp"

namespace adr {

// Per-block attention maps of one sample through one model, with that model's
// prediction for the sample.
template <typename R>
struct AttentionProfile {
  std::vector<SpatialMap<R>> blocks;
  int prediction = -1;
  int model_id = -1;  // 0 = aggregated, 1..S = domain-specific
};

struct DividedGroups {
  std::vector<int> positive;  // model ids whose prediction matched the label
  std::vector<int> negative;
};

template <typename R>
struct AssembledTargets {
  std::optional<std::vector<SpatialMap<R>>> task_related;    // U+ per block
  std::optional<std::vector<SpatialMap<R>>> domain_related;  // U- per block
};

// Per-block cross-channel attention: mean over channels of the in-channel
// spatial softmax (top-k with k = C). The result carries unit spatial mass.
template <typename R>
SpatialMap<R> block_attention(const FeatureBlock<R>& x) {
  InChannelAttention<R> a = spatial_softmax(x);
  return topk_mean(a, x.values.dim(0));
}

template <typename R>
DividedGroups divide(const std::vector<AttentionProfile<R>>& profiles, int label) {
  const int count = static_cast<int>(profiles.size());
  std::vector<bool> seen(static_cast<std::size_t>(count), false);
  for (const auto& p : profiles) {
    if (p.model_id < 0 || p.model_id >= count)
      throw ValidationError(format_msg("divide: model id ", p.model_id,
                                       " outside [0, ", count - 1, "]"));
    if (seen[static_cast<std::size_t>(p.model_id)])
      throw ValidationError(format_msg("divide: duplicate profile for model ", p.model_id));
    seen[static_cast<std::size_t>(p.model_id)] = true;
  }
  for (int j = 0; j < count; ++j)
    if (!seen[static_cast<std::size_t>(j)])
      throw ValidationError(format_msg("divide: missing profile for model ", j));

  DividedGroups g;
  for (int j = 0; j < count; ++j) {
    const auto it = std::find_if(profiles.begin(), profiles.end(),
                                 [j](const AttentionProfile<R>& p) { return p.model_id == j; });
    (it->prediction == label ? g.positive : g.negative).push_back(j);
  }
  return g;
}

// Cross-model max within each group, per block. Empty group -> absent target.
template <typename R>
AssembledTargets<R> assemble(const std::vector<AttentionProfile<R>>& profiles,
                             const DividedGroups& groups) {
  auto build = [&](const std::vector<int>& ids) -> std::optional<std::vector<SpatialMap<R>>> {
    if (ids.empty()) return std::nullopt;
    const std::size_t nblocks = profiles.front().blocks.size();
    std::vector<SpatialMap<R>> out;
    out.reserve(nblocks);
    for (std::size_t b = 0; b < nblocks; ++b) {
      std::vector<SpatialMap<R>> group_maps;
      for (int id : ids) {
        const auto it = std::find_if(profiles.begin(), profiles.end(),
                                     [id](const AttentionProfile<R>& p) { return p.model_id == id; });
        group_maps.push_back(it->blocks[b]);
      }
      out.push_back(*cross_model_max(group_maps));
    }
    return out;
  };
  AssembledTargets<R> t;
  t.task_related = build(groups.positive);
  t.domain_related = build(groups.negative);
  return t;
}

namespace detail {

template <typename R>
R frobenius_distance(const Tensor<R>& a, const Tensor<R>& b) {
  if (!a.same_shape(b))
    throw ValidationError(format_msg("attention distance: shape mismatch ", shape_str(a), " vs ",
                                     shape_str(b)));
  R ssq = R(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const R d = a[i] - b[i];
    ssq += d * d;
  }
  return std::sqrt(ssq);
}

}  // namespace detail

// Sum over blocks of || V0^b - U+^b ||_2; zero when the task-related target
// is absent.
template <typename R>
R dir_loss(const AttentionProfile<R>& aggregated, const AssembledTargets<R>& targets) {
  if (!targets.task_related) return R(0);
  if (targets.task_related->size() != aggregated.blocks.size())
    throw ValidationError("dir_loss: block count mismatch between profile and targets");
  R total = R(0);
  for (std::size_t b = 0; b < aggregated.blocks.size(); ++b)
    total += detail::frobenius_distance(aggregated.blocks[b].values,
                                        (*targets.task_related)[b].values);
  return total;
}

// Negated distance to the domain-related target; zero when absent.
template <typename R>
R dvr_loss(const AttentionProfile<R>& aggregated, const AssembledTargets<R>& targets) {
  if (!targets.domain_related) return R(0);
  if (targets.domain_related->size() != aggregated.blocks.size())
    throw ValidationError("dvr_loss: block count mismatch between profile and targets");
  R total = R(0);
  for (std::size_t b = 0; b < aggregated.blocks.size(); ++b)
    total += detail::frobenius_distance(aggregated.blocks[b].values,
                                        (*targets.domain_related)[b].values);
  return -total;
}

template <typename R>
R inter_loss(R l_dir, R l_dvr, R lambda_dir, R lambda_dvr) {
  if (lambda_dir < R(0) || lambda_dvr < R(0))
    throw ParameterError("inter_loss: loss weights must be non-negative");
  return lambda_dir * l_dir + lambda_dvr * l_dvr;
}

// ---------------------------------------------------------------------------
// Batched training path.
// ---------------------------------------------------------------------------

// Block attention over a batched tap [N, C, H, W] -> [N, H, W]. When
// `att_cache` is given it receives the per-channel softmax needed by the
// backward pass.
template <typename R>
Tensor<R> batch_block_attention(const Tensor<R>& tap, Tensor<R>* att_cache) {
  const int N = tap.dim(0), C = tap.dim(1), H = tap.dim(2), W = tap.dim(3);
  const int HW = H * W;
  const std::size_t per = static_cast<std::size_t>(C) * static_cast<std::size_t>(HW);
  Tensor<R> out({N, H, W});
  if (att_cache) *att_cache = Tensor<R>(tap.shape());
  Tensor<R> local({C, HW});
  for (int n = 0; n < N; ++n) {
    R* att = att_cache ? att_cache->data() + per * static_cast<std::size_t>(n) : local.data();
    kernels::spatial_softmax(tap.data() + per * static_cast<std::size_t>(n), C, HW, att);
    R* op = out.data() + static_cast<std::size_t>(n) * HW;
    for (int p = 0; p < HW; ++p) {
      R mean = R(0);
      for (int c = 0; c < C; ++c) mean += att[static_cast<std::size_t>(c) * HW + p];
      op[p] = mean / static_cast<R>(C);
    }
  }
  return out;
}

// dL/dtap from dL/dmap using the cached softmax.
template <typename R>
Tensor<R> batch_block_attention_backward(const Tensor<R>& att, const Tensor<R>& dmap) {
  const int N = att.dim(0), C = att.dim(1), H = att.dim(2), W = att.dim(3);
  const int HW = H * W;
  const std::size_t per = static_cast<std::size_t>(C) * static_cast<std::size_t>(HW);
  Tensor<R> dtap(att.shape());
  Tensor<R> datt({C, HW});
  for (int n = 0; n < N; ++n) {
    const R* dm = dmap.data() + static_cast<std::size_t>(n) * HW;
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p)
        datt[static_cast<std::size_t>(c) * HW + p] = dm[p] / static_cast<R>(C);
    kernels::spatial_softmax_backward(att.data() + per * static_cast<std::size_t>(n), datt.data(),
                                      C, HW, dtap.data() + per * static_cast<std::size_t>(n));
  }
  return dtap;
}

// maps[j][b] is an [N, H_b, W_b] tensor of block-b attention maps from model
// j (j = 0 aggregated, 1..S specific); predictions[j][n] the model's label
// guess. Computes mean-over-batch L_dir / L_dvr and accumulates
// d(lambda_dir * L_dir + lambda_dvr * L_dvr)/dV0 into d_v0[b]. Targets are
// built from detached values, so only V0 receives gradient.
template <typename R>
struct InterBatchResult {
  R dir = R(0);
  R dvr = R(0);
};

template <typename R>
InterBatchResult<R> inter_losses_batch(const std::vector<std::vector<Tensor<R>>>& maps,
                                       const std::vector<std::vector<int>>& predictions,
                                       const std::vector<int>& labels, R lambda_dir, R lambda_dvr,
                                       std::vector<Tensor<R>>* d_v0) {
  const int models = static_cast<int>(maps.size());
  const int nblocks = static_cast<int>(maps.front().size());
  const int N = maps.front().front().dim(0);
  InterBatchResult<R> res;
  const R inv_n = R(1) / static_cast<R>(N);

  std::vector<const Tensor<R>*> v0(static_cast<std::size_t>(nblocks));
  for (int b = 0; b < nblocks; ++b) v0[static_cast<std::size_t>(b)] = &maps[0][static_cast<std::size_t>(b)];

  std::vector<R> target;
  for (int n = 0; n < N; ++n) {
    std::vector<int> pos, neg;
    for (int j = 0; j < models; ++j)
      (predictions[static_cast<std::size_t>(j)][static_cast<std::size_t>(n)] ==
               labels[static_cast<std::size_t>(n)]
           ? pos
           : neg)
          .push_back(j);

    for (int b = 0; b < nblocks; ++b) {
      const Tensor<R>& v0b = *v0[static_cast<std::size_t>(b)];
      const int HW = v0b.dim(1) * v0b.dim(2);
      const std::size_t base = static_cast<std::size_t>(n) * static_cast<std::size_t>(HW);
      auto run_group = [&](const std::vector<int>& ids, R sign, R lambda) {
        if (ids.empty()) return;
        target.assign(static_cast<std::size_t>(HW), R(0));
        for (std::size_t p = 0; p < static_cast<std::size_t>(HW); ++p) {
          R best = maps[static_cast<std::size_t>(ids[0])][static_cast<std::size_t>(b)][base + p];
          for (std::size_t t = 1; t < ids.size(); ++t)
            best = std::max(best, maps[static_cast<std::size_t>(ids[t])][static_cast<std::size_t>(b)]
                                      [base + p]);
          target[p] = best;
        }
        R ssq = R(0);
        for (std::size_t p = 0; p < static_cast<std::size_t>(HW); ++p) {
          const R d = v0b[base + p] - target[p];
          ssq += d * d;
        }
        const R norm = std::sqrt(ssq);
        (sign > R(0) ? res.dir : res.dvr) += sign * norm * inv_n;
        if (d_v0 && lambda != R(0)) {
          // d norm/dv = diff / sqrt(ssq + eps); defined as 0 at ssq = 0.
          const R factor = sign * lambda * inv_n / std::sqrt(ssq + R(1e-12));
          Tensor<R>& sink = (*d_v0)[static_cast<std::size_t>(b)];
          for (std::size_t p = 0; p < static_cast<std::size_t>(HW); ++p)
            sink[base + p] += factor * (v0b[base + p] - target[p]);
        }
      };
      run_group(pos, R(1), lambda_dir);
      run_group(neg, R(-1), lambda_dvr);
    }
  }
  return res;
}

}  // namespace adr
