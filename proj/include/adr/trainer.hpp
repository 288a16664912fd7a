// Two-stage training schema.
//
// Stage 1 trains one domain-specific model per source domain with
// L_cls + lambda_intra * L_intra. Stage 2 trains the domain-aggregated model
// on the union of source domains with the total loss
// L_cls + lambda_intra * L_intra + lambda_dir * L_dir + lambda_dvr * L_dvr,
// running the frozen stage-1 models inference-only to build the assembled
// attention targets.
//
// Every random decision (init, shuffles, augmentation) comes from a counter
// stream keyed by (seed, purpose, epoch, domain, index): serial and parallel
// execution and repeated runs are bit-identical.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "adr/checkpoint.hpp"
#include "adr/config.hpp"
#include "adr/datagen.hpp"
#include "adr/inter.hpp"
#include "adr/model.hpp"
#include "adr/optimizer.hpp"

namespace adr {

inline constexpr std::uint64_t kTagModelInit = 0x10de11;
inline constexpr std::uint64_t kTagShuffle = 0x5bff1e;
inline constexpr std::uint64_t kTagAugment = 0xa46;

struct EpochRow {
  int epoch = 0;
  std::string split;
  double accuracy = 0;
  double loss_total = 0, loss_cls = 0, loss_intra = 0, loss_dir = 0, loss_dvr = 0;
};

struct BatchRow {
  double total = 0, cls = 0, intra = 0, dir = 0, dvr = 0;
};

template <typename R>
struct TrainOutcome {
  AdrModel<R> model;  // best-by-validation snapshot
  std::vector<EpochRow> metrics;
  std::vector<BatchRow> batch_logs;
  std::set<int> trained_domains;  // audit: domain id of every training sample
  double best_val_accuracy = 0.0;
  int best_epoch = -1;
};

// ---------------------------------------------------------------------------
// Augmentation (applied at native resolution, before optional downsampling).
// ---------------------------------------------------------------------------
namespace detail_train {

inline void augment_sample(const SampleRecord& rec, int native, const TrainConfig& cfg,
                           RandomStream& rs, std::vector<double>& hwc) {
  const std::size_t n = static_cast<std::size_t>(native) * native * 3;
  hwc.resize(n);
  for (std::size_t i = 0; i < n; ++i) hwc[i] = rec.rgb[i] / 255.0;

  auto at = [&](int x, int y, int c) -> double& {
    return hwc[(static_cast<std::size_t>(y) * native + x) * 3 + static_cast<std::size_t>(c)];
  };

  if (cfg.augment_flip && rs.bernoulli(0.5)) {
    for (int y = 0; y < native; ++y)
      for (int x = 0; x < native / 2; ++x)
        for (int c = 0; c < 3; ++c) std::swap(at(x, y, c), at(native - 1 - x, y, c));
  }

  if (cfg.augment_crop) {
    const int dx = rs.uniform_int(9) - 4;
    const int dy = rs.uniform_int(9) - 4;
    if (dx != 0 || dy != 0) {
      std::vector<double> src = hwc;
      auto sat = [&](int x, int y, int c) {
        x = std::clamp(x, 0, native - 1);
        y = std::clamp(y, 0, native - 1);
        return src[(static_cast<std::size_t>(y) * native + x) * 3 + static_cast<std::size_t>(c)];
      };
      for (int y = 0; y < native; ++y)
        for (int x = 0; x < native; ++x)
          for (int c = 0; c < 3; ++c) at(x, y, c) = sat(x + dx, y + dy, c);
    }
  }

  if (cfg.augment_jitter) {
    const double brightness = rs.uniform(0.9, 1.1);
    const double contrast = rs.uniform(0.9, 1.1);
    const double saturation = rs.uniform(0.9, 1.1);
    for (int y = 0; y < native; ++y)
      for (int x = 0; x < native; ++x) {
        double r = at(x, y, 0) * brightness;
        double g = at(x, y, 1) * brightness;
        double b = at(x, y, 2) * brightness;
        r = (r - 0.5) * contrast + 0.5;
        g = (g - 0.5) * contrast + 0.5;
        b = (b - 0.5) * contrast + 0.5;
        const double luma = 0.299 * r + 0.587 * g + 0.114 * b;
        at(x, y, 0) = std::clamp(luma + (r - luma) * saturation, 0.0, 1.0);
        at(x, y, 1) = std::clamp(luma + (g - luma) * saturation, 0.0, 1.0);
        at(x, y, 2) = std::clamp(luma + (b - luma) * saturation, 0.0, 1.0);
      }
  }

  if (cfg.augment_grayscale && rs.bernoulli(cfg.grayscale_p)) {
    for (int y = 0; y < native; ++y)
      for (int x = 0; x < native; ++x) {
        const double luma = 0.299 * at(x, y, 0) + 0.587 * at(x, y, 1) + 0.114 * at(x, y, 2);
        at(x, y, 0) = at(x, y, 1) = at(x, y, 2) = luma;
      }
  }
}

// HWC double at native resolution -> one CHW row of the batch tensor with box
// downsampling to the target resolution.
template <typename R>
void hwc_to_batch_row(const std::vector<double>& hwc, int native, Tensor<R>& out, int n) {
  const int target = out.dim(2);
  const int factor = native / target;
  const double inv = 1.0 / (factor * factor);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < target; ++y)
      for (int x = 0; x < target; ++x) {
        double acc = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            acc += hwc[(static_cast<std::size_t>(y * factor + dy) * native + (x * factor + dx)) * 3 +
                       static_cast<std::size_t>(c)];
        out.at4(n, c, y, x) = static_cast<R>(acc * inv);
      }
}

}  // namespace detail_train

// Evaluation at eval-mode: top-1 accuracy (%) and mean classification loss.
template <typename R>
std::pair<double, double> evaluate_model(AdrModel<R>& model,
                                         const std::vector<const SampleRecord*>& samples,
                                         int image_size) {
  const int input = model.backbone.config().input_h;
  const int chunk = 64;
  std::size_t correct = 0;
  double loss_sum = 0;
  for (std::size_t off = 0; off < samples.size(); off += chunk) {
    const std::size_t hi = std::min(samples.size(), off + chunk);
    std::vector<const SampleRecord*> part(samples.begin() + static_cast<std::ptrdiff_t>(off),
                                          samples.begin() + static_cast<std::ptrdiff_t>(hi));
    Tensor<R> x = images_to_tensor<R>(part, image_size, input);
    std::vector<int> labels;
    for (const auto* s : part) labels.push_back(s->label);
    std::vector<Tensor<R>> taps;
    Tensor<R> logits = model.backbone.forward_with_taps(x, Mode::kEval, taps, nullptr);
    loss_sum += static_cast<double>(CrossEntropy<R>::forward(logits, labels, nullptr)) *
                static_cast<double>(part.size());
    auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == labels[i]) ++correct;
  }
  if (samples.empty()) return {0.0, 0.0};
  return {100.0 * static_cast<double>(correct) / static_cast<double>(samples.size()),
          loss_sum / static_cast<double>(samples.size())};
}

template <typename R>
std::pair<double, double> evaluate_model(AdrModel<R>& model,
                                         const std::vector<SampleRecord>& split, int image_size) {
  std::vector<const SampleRecord*> ptrs;
  for (const auto& s : split) ptrs.push_back(&s);
  return evaluate_model(model, ptrs, image_size);
}

// ---------------------------------------------------------------------------
// Core loop shared by both stages.
// ---------------------------------------------------------------------------
template <typename R>
TrainOutcome<R> train_model(const std::vector<const DomainDataset*>& sources,
                            std::vector<AdrModel<R>>& frozen, const TrainConfig& cfg,
                            int init_key) {
  cfg.validate();
  if (sources.empty()) throw ConfigError("train: no source datasets given");
  for (const auto* ds : sources)
    if (ds->train.empty())
      throw ConfigError(format_msg("train: domain ", ds->domain_id, " has an empty train split"));

  const int image_size = sources.front()->image_size;
  int classes = 0;
  for (const auto* ds : sources) {
    if (ds->image_size != image_size)
      throw ValidationError("train: datasets disagree on image size");
    for (const auto* split : {&ds->train, &ds->val, &ds->test})
      for (const auto& rec : *split) classes = std::max(classes, rec.label + 1);
  }

  const BackboneConfig bcfg = backbone_config_for(cfg, image_size, classes);
  const SCEConfig scfg = sce_config_for(cfg);

  for (auto& fm : frozen)
    if (!(fm.backbone.config() == bcfg))
      throw ValidationError("train: frozen checkpoint architecture does not match this run");

  AdrModel<R> model;
  model.init(bcfg, scfg, key_combine(mix64(cfg.seed), kTagModelInit + static_cast<std::uint64_t>(init_key)));
  SGD<R> sgd(model.params(), static_cast<R>(cfg.momentum), static_cast<R>(cfg.weight_decay));
  CosineSchedule sched{cfg.lr, cfg.epochs};

  const int B = bcfg.blocks;
  std::vector<int> block_set = cfg.inter_blocks;
  if (block_set.empty())
    for (int b = 1; b <= B; ++b) block_set.push_back(b);
  for (int b : block_set)
    if (b < 1 || b > B)
      throw ConfigError(format_msg("train: inter block ", b, " outside [1, ", B, "]"));

  const bool intra_on = cfg.lambda_intra != 0.0;
  const bool inter_on = (cfg.lambda_dir != 0.0 || cfg.lambda_dvr != 0.0) && !frozen.empty();
  const int S = static_cast<int>(sources.size());

  TrainOutcome<R> out;
  std::vector<double> hwc_scratch;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const R lr = static_cast<R>(sched.lr_at(epoch));

    // Domain-balanced batch plan.
    std::vector<std::vector<int>> order(static_cast<std::size_t>(S));
    int min_n = 1 << 30;
    for (int d = 0; d < S; ++d) {
      const int n = static_cast<int>(sources[static_cast<std::size_t>(d)]->train.size());
      RandomStream rs = RandomStream::derive(cfg.seed, kTagShuffle, epoch,
                                             sources[static_cast<std::size_t>(d)]->domain_id);
      order[static_cast<std::size_t>(d)] = rs.permutation(n);
      min_n = std::min(min_n, n);
    }
    const int quota = std::max(1, cfg.batch_size / S);
    const int batches = std::max(1, min_n / quota);

    double ep_cls = 0, ep_intra = 0, ep_dir = 0, ep_dvr = 0, ep_total = 0;
    std::size_t ep_correct = 0, ep_count = 0;

    for (int bi = 0; bi < batches; ++bi) {
      // Gather the batch (quota samples per domain).
      std::vector<const SampleRecord*> recs;
      std::vector<int> labels;
      for (int d = 0; d < S; ++d) {
        const auto& ds = *sources[static_cast<std::size_t>(d)];
        for (int q = 0; q < quota; ++q) {
          const int pos = bi * quota + q;
          if (pos >= static_cast<int>(order[static_cast<std::size_t>(d)].size())) break;
          const int idx = order[static_cast<std::size_t>(d)][static_cast<std::size_t>(pos)];
          recs.push_back(&ds.train[static_cast<std::size_t>(idx)]);
          labels.push_back(ds.train[static_cast<std::size_t>(idx)].label);
          out.trained_domains.insert(ds.domain_id);
        }
      }
      const int N = static_cast<int>(recs.size());
      if (N == 0) continue;

      Tensor<R> x({N, 3, bcfg.input_h, bcfg.input_w});
      for (int n = 0; n < N; ++n) {
        RandomStream rs = RandomStream::derive(cfg.seed, kTagAugment, epoch, recs[static_cast<std::size_t>(n)]->domain,
                                               bi * cfg.batch_size + n);
        detail_train::augment_sample(*recs[static_cast<std::size_t>(n)], image_size, cfg, rs,
                                     hwc_scratch);
        detail_train::hwc_to_batch_row(hwc_scratch, image_size, x, n);
      }

      sgd.zero_grad();

      std::vector<Tensor<R>> taps;
      typename Backbone<R>::Cache cache;
      Tensor<R> logits = model.backbone.forward_with_taps(x, Mode::kTrain, taps, &cache);
      Tensor<R> probs;
      const double l_cls = static_cast<double>(CrossEntropy<R>::forward(logits, labels, &probs));

      double l_intra = 0;
      IntraLossCache<R> icache;
      if (intra_on) l_intra = static_cast<double>(intra_loss_batch(taps.back(), model.sce, cfg.topk, icache));

      double l_dir = 0, l_dvr = 0;
      std::vector<Tensor<R>> tap_grads(static_cast<std::size_t>(B));
      std::vector<Tensor<R>> m0_att;  // per block-in-set softmax caches

      if (inter_on) {
        // maps[j][k]: attention of model j on block_set[k]; j=0 aggregated.
        std::vector<std::vector<Tensor<R>>> maps(frozen.size() + 1);
        std::vector<std::vector<int>> predictions(frozen.size() + 1);
        predictions[0] = argmax_rows(logits);
        for (std::size_t k = 0; k < block_set.size(); ++k) {
          Tensor<R> att;
          maps[0].push_back(batch_block_attention(taps[static_cast<std::size_t>(block_set[k] - 1)], &att));
          m0_att.push_back(std::move(att));
        }
        for (std::size_t j = 0; j < frozen.size(); ++j) {
          std::vector<Tensor<R>> ftaps;
          Tensor<R> flogits = frozen[j].backbone.forward_with_taps(x, Mode::kEval, ftaps, nullptr);
          predictions[j + 1] = argmax_rows(flogits);
          for (int b : block_set)
            maps[j + 1].push_back(batch_block_attention<R>(ftaps[static_cast<std::size_t>(b - 1)],
                                                           static_cast<Tensor<R>*>(nullptr)));
        }

        std::vector<Tensor<R>> d_v0;
        for (std::size_t k = 0; k < block_set.size(); ++k)
          d_v0.emplace_back(maps[0][k].shape());
        auto res = inter_losses_batch<R>(maps, predictions, labels, static_cast<R>(cfg.lambda_dir),
                                         static_cast<R>(cfg.lambda_dvr), &d_v0);
        l_dir = static_cast<double>(res.dir);
        l_dvr = static_cast<double>(res.dvr);
        for (std::size_t k = 0; k < block_set.size(); ++k) {
          Tensor<R> dtap = batch_block_attention_backward(m0_att[k], d_v0[k]);
          Tensor<R>& sink = tap_grads[static_cast<std::size_t>(block_set[k] - 1)];
          if (sink.empty())
            sink = std::move(dtap);
          else
            for (std::size_t i = 0; i < sink.size(); ++i) sink[i] += dtap[i];
        }
      }

      if (intra_on) {
        Tensor<R> dlast = intra_loss_backward(model.sce, icache, static_cast<R>(cfg.lambda_intra));
        Tensor<R>& sink = tap_grads[static_cast<std::size_t>(B - 1)];
        if (sink.empty())
          sink = std::move(dlast);
        else
          for (std::size_t i = 0; i < sink.size(); ++i) sink[i] += dlast[i];
      }

      Tensor<R> dlogits = CrossEntropy<R>::backward(probs, labels, R(1));
      model.backbone.backward(cache, dlogits, tap_grads);
      sgd.step(lr);

      const double total = l_cls + cfg.lambda_intra * l_intra + cfg.lambda_dir * l_dir +
                           cfg.lambda_dvr * l_dvr;
      out.batch_logs.push_back({total, l_cls, l_intra, l_dir, l_dvr});
      ep_cls += l_cls;
      ep_intra += l_intra;
      ep_dir += l_dir;
      ep_dvr += l_dvr;
      ep_total += total;
      auto preds = argmax_rows(logits);
      for (int n = 0; n < N; ++n)
        if (preds[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(n)]) ++ep_correct;
      ep_count += static_cast<std::size_t>(N);
    }

    const double inv_b = batches > 0 ? 1.0 / batches : 0.0;
    out.metrics.push_back({epoch, "train",
                           ep_count ? 100.0 * static_cast<double>(ep_correct) / static_cast<double>(ep_count) : 0.0,
                           ep_total * inv_b, ep_cls * inv_b, ep_intra * inv_b, ep_dir * inv_b,
                           ep_dvr * inv_b});

    // Validation on the union of the sources' val splits.
    std::vector<const SampleRecord*> val;
    for (const auto* ds : sources)
      for (const auto& rec : ds->val) val.push_back(&rec);
    const auto [val_acc, val_cls] = evaluate_model(model, val, image_size);
    out.metrics.push_back({epoch, "val", val_acc, val_cls, val_cls, 0.0, 0.0, 0.0});

    if (out.best_epoch < 0 || val_acc > out.best_val_accuracy) {
      out.best_val_accuracy = val_acc;
      out.best_epoch = epoch;
      out.model = model;
    }
  }
  return out;
}

// Stage 1: one domain-specific model trained on its own domain with
// L_cls + lambda_intra * L_intra (no inter-model terms by definition).
template <typename R>
TrainOutcome<R> train_specific(const DomainDataset& dataset, const TrainConfig& cfg) {
  TrainConfig c1 = cfg;
  c1.lambda_dir = 0.0;
  c1.lambda_dvr = 0.0;
  std::vector<AdrModel<R>> none;
  return train_model<R>({&dataset}, none, c1, dataset.domain_id + 1);
}

// Stage 2: the aggregated model against frozen stage-1 models.
template <typename R>
TrainOutcome<R> train_aggregated(const std::vector<const DomainDataset*>& sources,
                                 std::vector<AdrModel<R>>& frozen, const TrainConfig& cfg) {
  return train_model<R>(sources, frozen, cfg, 0);
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochRow>& rows) {
  std::ofstream f(path);
  if (!f) throw ValidationError("metrics: cannot write " + path);
  f << "epoch,split,accuracy,loss_total,loss_cls,loss_intra,loss_dir,loss_dvr\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch,
                  r.split.c_str(), r.accuracy, r.loss_total, r.loss_cls, r.loss_intra, r.loss_dir,
                  r.loss_dvr);
    f << buf;
  }
}

}  // namespace adr
