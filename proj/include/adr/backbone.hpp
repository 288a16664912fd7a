// Small configurable convolutional classifier with tap-able blocks.
// Block: conv3x3 -> batch norm -> ReLU -> conv3x3 -> ReLU -> 2x2 max pool.
// Head: global average pool -> linear. Taps expose each block's output.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "adr/common.hpp"
#include "adr/layers.hpp"
#include "adr/tensor.hpp"

namespace adr {

struct BackboneConfig {
  int blocks = 4;
  std::vector<int> channels = {16, 32, 64, 128};
  int input_h = 64;
  int input_w = 64;
  int input_ch = 3;
  int classes = 7;

  void validate() const {
    if (blocks < 1) throw ConfigError("BackboneConfig: need at least one block");
    if (static_cast<int>(channels.size()) != blocks)
      throw ConfigError(format_msg("BackboneConfig: ", channels.size(), " channel entries for ",
                                   blocks, " blocks"));
    if (classes < 2) throw ConfigError("BackboneConfig: need at least two classes");
    int h = input_h, w = input_w;
    for (int b = 0; b < blocks; ++b) {
      if (h % 2 != 0 || w % 2 != 0)
        throw ConfigError(format_msg("BackboneConfig: block ", b + 1, " input ", h, "x", w,
                                     " is not divisible by 2"));
      h /= 2;
      w /= 2;
    }
    if (h < 2 || w < 2)
      throw ConfigError(format_msg("BackboneConfig: final block resolution ", h, "x", w,
                                   " is below 2x2"));
  }

  // Tap shape of block b (1-based): channels x H x W after the block's pool.
  std::vector<int> tap_shape(int b) const {
    return {channels[static_cast<std::size_t>(b - 1)], input_h >> b, input_w >> b};
  }

  bool operator==(const BackboneConfig&) const = default;
};

template <typename R>
class Backbone {
 public:
  struct Block {
    Conv2d<R> c1;
    BatchNorm2d<R> bn;
    Conv2d<R> c2;
  };

  struct BlockCache {
    Tensor<R> x;        // block input
    Tensor<R> a;        // c1 output
    typename BatchNorm2d<R>::Cache bn;
    Tensor<R> b_out;    // bn output
    Tensor<R> r1;       // relu(b_out)
    Tensor<R> c_out;    // c2 output
    Tensor<R> r2;       // relu(c_out); pool input
    typename MaxPool2d<R>::Cache pool;
  };

  struct Cache {
    std::vector<BlockCache> blocks;
    Tensor<R> gap_in;   // final tap (= pool output of last block)
    Tensor<R> feats;    // gap output
  };

  Backbone() = default;

  void init(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    cfg_ = config;
    RandomStream rs = RandomStream::derive(seed, 0x6261636bULL /* "back" */);
    blocks_.clear();
    blocks_.resize(static_cast<std::size_t>(cfg_.blocks));
    int in_c = cfg_.input_ch;
    for (int b = 0; b < cfg_.blocks; ++b) {
      const int out_c = cfg_.channels[static_cast<std::size_t>(b)];
      blocks_[static_cast<std::size_t>(b)].c1.init(in_c, out_c, 3, 1, rs);
      blocks_[static_cast<std::size_t>(b)].bn.init(out_c);
      blocks_[static_cast<std::size_t>(b)].c2.init(out_c, out_c, 3, 1, rs);
      in_c = out_c;
    }
    // Small head init keeps the initial loss near ln(classes).
    head_.init(in_c, cfg_.classes, rs, R(0.25));
  }

  const BackboneConfig& config() const { return cfg_; }

  // Returns logits [N, Z]; fills `taps` with the B block outputs.
  Tensor<R> forward_with_taps(const Tensor<R>& x, Mode mode, std::vector<Tensor<R>>& taps,
                              Cache* cache) {
    if (x.rank() != 4 || x.dim(1) != cfg_.input_ch || x.dim(2) != cfg_.input_h ||
        x.dim(3) != cfg_.input_w)
      throw ValidationError(format_msg("Backbone: input ", shape_str(x), " does not match ",
                                       "configured ", cfg_.input_ch, "x", cfg_.input_h, "x",
                                       cfg_.input_w));
    taps.clear();
    if (cache) cache->blocks.resize(blocks_.size());
    Tensor<R> cur = x;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Block& blk = blocks_[b];
      BlockCache* bc = cache ? &cache->blocks[b] : nullptr;
      Tensor<R> a = blk.c1.forward(cur);
      Tensor<R> bnv = blk.bn.forward(a, mode, bc ? &bc->bn : nullptr);
      Tensor<R> r1 = relu(bnv);
      Tensor<R> c = blk.c2.forward(r1);
      Tensor<R> r2 = relu(c);
      Tensor<R> pooled = MaxPool2d<R>::forward(r2, bc ? &bc->pool : nullptr);
      if (bc) {
        bc->x = std::move(cur);
        bc->a = std::move(a);
        bc->b_out = std::move(bnv);
        bc->r1 = std::move(r1);
        bc->c_out = std::move(c);
        bc->r2 = std::move(r2);
      }
      taps.push_back(pooled);
      cur = std::move(pooled);
    }
    Tensor<R> feats = global_avg_pool(cur);
    Tensor<R> logits = head_.forward(feats);
    if (cache) {
      cache->gap_in = std::move(cur);
      cache->feats = std::move(feats);
    }
    return logits;
  }

  // dlogits plus optional extra gradients flowing into each tap (empty tensor
  // = no contribution). Accumulates parameter gradients.
  void backward(Cache& cache, const Tensor<R>& dlogits, std::vector<Tensor<R>>& tap_grads) {
    Tensor<R> dfeats = head_.backward(cache.feats, dlogits);
    Tensor<R> dtap = global_avg_pool_backward(cache.gap_in.shape(), dfeats);
    for (int b = static_cast<int>(blocks_.size()) - 1; b >= 0; --b) {
      BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];
      Block& blk = blocks_[static_cast<std::size_t>(b)];
      if (static_cast<std::size_t>(b) < tap_grads.size() &&
          !tap_grads[static_cast<std::size_t>(b)].empty()) {
        const Tensor<R>& extra = tap_grads[static_cast<std::size_t>(b)];
        for (std::size_t i = 0; i < dtap.size(); ++i) dtap[i] += extra[i];
      }
      Tensor<R> dr2 = MaxPool2d<R>::backward(bc.pool, dtap);
      Tensor<R> dc = relu_backward(bc.c_out, dr2);
      Tensor<R> dr1 = blk.c2.backward(bc.r1, dc);
      Tensor<R> dbn = relu_backward(bc.b_out, dr1);
      Tensor<R> da = blk.bn.backward(bc.bn, dbn);
      dtap = blk.c1.backward(bc.x, da);
    }
  }

  std::vector<int> predict(const Tensor<R>& x) {
    std::vector<Tensor<R>> taps;
    Tensor<R> logits = forward_with_taps(x, Mode::kEval, taps, nullptr);
    return argmax_rows(logits);
  }

  std::vector<NamedParam<R>> params() {
    std::vector<NamedParam<R>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b + 1);
      blocks_[b].c1.collect(out, p + ".c1");
      blocks_[b].bn.collect(out, p + ".bn");
      blocks_[b].c2.collect(out, p + ".c2");
    }
    head_.collect(out, "head");
    return out;
  }

  std::vector<NamedBuffer<R>> buffers() {
    std::vector<NamedBuffer<R>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      blocks_[b].bn.collect_buffers(out, "block" + std::to_string(b + 1) + ".bn");
    return out;
  }

 private:
  BackboneConfig cfg_;
  std::vector<Block> blocks_;
  Linear<R> head_;
};

}  // namespace adr
