// A trainable unit: backbone classifier plus the SCE block attached to its
// last tap. The SCE parameters train jointly with the host model but receive
// gradient only through the intra-model loss.
#pragma once

#include <string>
#include <vector>

#include "adr/backbone.hpp"
#include "adr/config.hpp"
#include "adr/sce.hpp"

namespace adr {

template <typename R>
struct AdrModel {
  Backbone<R> backbone;
  SCEBlock<R> sce;

  void init(const BackboneConfig& bcfg, const SCEConfig& scfg, std::uint64_t seed) {
    backbone.init(bcfg, seed);
    sce.cfg = scfg;
    RandomStream rs = RandomStream::derive(seed, 0x5ce5ceULL);
    sce.init(bcfg.channels.back(), rs);
  }

  std::vector<NamedParam<R>> params() {
    auto out = backbone.params();
    std::vector<NamedParam<R>> sce_params;
    sce.collect(sce_params, "sce");
    for (auto& np : sce_params) out.push_back(np);
    return out;
  }

  std::vector<NamedBuffer<R>> buffers() { return backbone.buffers(); }
};

// Backbone geometry for a dataset + train config pair.
inline BackboneConfig backbone_config_for(const TrainConfig& cfg, int image_size, int classes) {
  BackboneConfig b;
  if (cfg.backbone_blocks > 0) b.blocks = cfg.backbone_blocks;
  if (!cfg.channels.empty()) b.channels = cfg.channels;
  const int in = cfg.input_size > 0 ? cfg.input_size : image_size;
  b.input_h = b.input_w = in;
  b.classes = classes;
  b.validate();
  return b;
}

inline SCEConfig sce_config_for(const TrainConfig& cfg) {
  SCEConfig s;
  s.scale = cfg.scale;
  s.topk = cfg.topk;
  s.validate();
  return s;
}

}  // namespace adr
