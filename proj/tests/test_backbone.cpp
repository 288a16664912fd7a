#include <doctest.h>

#include <cmath>
#include <vector>

#include "adr/backbone.hpp"
#include "adr/rng.hpp"
#include "support/gradcheck.hpp"

using adr::Backbone;
using adr::BackboneConfig;
using adr::Tensor;

namespace {

Tensor<double> random_images(const BackboneConfig& cfg, int n, std::uint64_t seed) {
  adr::RandomStream rs(seed);
  Tensor<double> x({n, cfg.input_ch, cfg.input_h, cfg.input_w});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rs.uniform();
  return x;
}

}  // namespace

TEST_CASE("backbone: default config tap shapes follow the halving rule") {
  BackboneConfig cfg;
  cfg.validate();
  CHECK(cfg.tap_shape(1) == std::vector<int>{16, 32, 32});
  CHECK(cfg.tap_shape(2) == std::vector<int>{32, 16, 16});
  CHECK(cfg.tap_shape(3) == std::vector<int>{64, 8, 8});
  CHECK(cfg.tap_shape(4) == std::vector<int>{128, 4, 4});

  Backbone<double> model;
  model.init(cfg, 1);
  auto x = random_images(cfg, 2, 2);
  std::vector<Tensor<double>> taps;
  auto logits = model.forward_with_taps(x, adr::Mode::kEval, taps, nullptr);
  CHECK(logits.shape() == std::vector<int>{2, 7});
  REQUIRE(taps.size() == 4);
  for (int b = 1; b <= 4; ++b) {
    auto expect = cfg.tap_shape(b);
    CHECK(taps[static_cast<std::size_t>(b - 1)].shape() ==
          std::vector<int>{2, expect[0], expect[1], expect[2]});
  }
}

TEST_CASE("backbone: tap shapes match the config across a grid of configs") {
  struct Case {
    int blocks;
    std::vector<int> channels;
    int in;
  };
  for (const auto& tc : {Case{2, {4, 8}, 16}, Case{3, {4, 8, 12}, 32}, Case{4, {2, 4, 6, 8}, 64}}) {
    BackboneConfig cfg;
    cfg.blocks = tc.blocks;
    cfg.channels = tc.channels;
    cfg.input_h = cfg.input_w = tc.in;
    cfg.classes = 5;
    cfg.validate();
    Backbone<double> model;
    model.init(cfg, 3);
    auto x = random_images(cfg, 1, 4);
    std::vector<Tensor<double>> taps;
    model.forward_with_taps(x, adr::Mode::kEval, taps, nullptr);
    for (int b = 1; b <= tc.blocks; ++b) {
      auto expect = cfg.tap_shape(b);
      CHECK(taps[static_cast<std::size_t>(b - 1)].shape() ==
            std::vector<int>{1, expect[0], expect[1], expect[2]});
    }
  }
}

TEST_CASE("backbone: config validation rejects bad geometry") {
  BackboneConfig cfg;
  cfg.input_h = 60;  // 60 -> 30 -> 15: not divisible at block 3
  CHECK_THROWS_AS(cfg.validate(), adr::ConfigError);

  BackboneConfig tiny;
  tiny.blocks = 4;
  tiny.channels = {2, 2, 2, 2};
  tiny.input_h = tiny.input_w = 16;  // final tap would be 1x1
  CHECK_THROWS_AS(tiny.validate(), adr::ConfigError);

  BackboneConfig mismatch;
  mismatch.blocks = 3;
  CHECK_THROWS_AS(mismatch.validate(), adr::ConfigError);
}

TEST_CASE("backbone: eval mode is deterministic bit-for-bit") {
  BackboneConfig cfg;
  cfg.blocks = 2;
  cfg.channels = {4, 8};
  cfg.input_h = cfg.input_w = 16;
  cfg.classes = 4;
  Backbone<double> model;
  model.init(cfg, 9);
  auto x = random_images(cfg, 3, 10);
  std::vector<Tensor<double>> taps1, taps2;
  auto l1 = model.forward_with_taps(x, adr::Mode::kEval, taps1, nullptr);
  auto l2 = model.forward_with_taps(x, adr::Mode::kEval, taps2, nullptr);
  for (std::size_t i = 0; i < l1.size(); ++i) CHECK(l1[i] == l2[i]);
  for (std::size_t b = 0; b < taps1.size(); ++b)
    for (std::size_t i = 0; i < taps1[b].size(); ++i) CHECK(taps1[b][i] == taps2[b][i]);
}

TEST_CASE("backbone: batch of N produces N x Z logits and argmax predictions") {
  BackboneConfig cfg;
  cfg.blocks = 2;
  cfg.channels = {4, 6};
  cfg.input_h = cfg.input_w = 16;
  cfg.classes = 5;
  Backbone<double> model;
  model.init(cfg, 11);
  auto x = random_images(cfg, 6, 12);
  std::vector<Tensor<double>> taps;
  auto logits = model.forward_with_taps(x, adr::Mode::kEval, taps, nullptr);
  CHECK(logits.shape() == std::vector<int>{6, 5});
  auto preds = model.predict(x);
  REQUIRE(preds.size() == 6);
  for (int n = 0; n < 6; ++n) {
    int best = 0;
    for (int z = 1; z < 5; ++z)
      if (logits.at2(n, z) > logits.at2(n, best)) best = z;
    CHECK(preds[static_cast<std::size_t>(n)] == best);
  }
}

TEST_CASE("backbone: initial loss on random labels sits near ln(classes)") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    BackboneConfig cfg;  // default: 4 blocks, 7 classes
    Backbone<double> model;
    model.init(cfg, seed);
    auto x = random_images(cfg, 16, seed + 100);
    adr::RandomStream rs(seed + 200);
    std::vector<int> labels;
    for (int n = 0; n < 16; ++n) labels.push_back(rs.uniform_int(cfg.classes));
    std::vector<Tensor<double>> taps;
    auto logits = model.forward_with_taps(x, adr::Mode::kEval, taps, nullptr);
    const double loss = adr::CrossEntropy<double>::forward(logits, labels, nullptr);
    const double lnz = std::log(static_cast<double>(cfg.classes));
    CHECK(loss > 0.9 * lnz);
    CHECK(loss < 1.1 * lnz);
  }
}

TEST_CASE("backbone: end-to-end parameter gradients match finite differences") {
  BackboneConfig cfg;
  cfg.blocks = 2;
  cfg.channels = {3, 4};
  cfg.input_h = cfg.input_w = 8;
  cfg.classes = 3;
  Backbone<double> model;
  model.init(cfg, 21);
  auto x = random_images(cfg, 2, 22);
  std::vector<int> labels = {0, 2};

  auto loss_value = [&](Backbone<double>& m) {
    std::vector<Tensor<double>> taps;
    typename Backbone<double>::Cache cache;
    auto logits = m.forward_with_taps(x, adr::Mode::kTrain, taps, &cache);
    return adr::CrossEntropy<double>::forward(logits, labels, nullptr);
  };

  for (auto& np : model.params()) np.p->zero_grad();
  {
    std::vector<Tensor<double>> taps;
    typename Backbone<double>::Cache cache;
    auto logits = model.forward_with_taps(x, adr::Mode::kTrain, taps, &cache);
    Tensor<double> probs;
    adr::CrossEntropy<double>::forward(logits, labels, &probs);
    auto dlogits = adr::CrossEntropy<double>::backward(probs, labels, 1.0);
    std::vector<Tensor<double>> no_extra;
    model.backward(cache, dlogits, no_extra);
  }

  // A fresh model clone per probe keeps running BN stats out of the picture
  // (train-mode normalization itself only depends on the current batch).
  for (auto& np : model.params()) {
    auto loss_fn = [&](const std::vector<double>& p) {
      Backbone<double> clone;
      clone.init(cfg, 21);
      // Copy all parameter values, then substitute the probed vector.
      auto src = model.params();
      auto dst = clone.params();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i].p->v = src[i].p->v;
      for (std::size_t i = 0; i < dst.size(); ++i)
        if (dst[i].name == np.name) dst[i].p->v = Tensor<double>(np.p->v.shape(), p);
      return loss_value(clone);
    };
    auto res = testsupport::gradcheck(loss_fn, np.p->v.vec(), np.p->g.vec(), 1e-5);
    CHECK_MESSAGE(res.max_rel_err <= 5e-4, np.name, " worst index ", res.worst_index,
                  " analytic ", res.analytic_at_worst, " numeric ", res.numeric_at_worst);
  }
}
