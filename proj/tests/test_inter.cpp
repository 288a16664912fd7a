#include <doctest.h>

#include <cmath>
#include <vector>

#include "adr/inter.hpp"
#include "adr/rng.hpp"
#include "support/gradcheck.hpp"

using adr::AttentionProfile;
using adr::FeatureBlock;
using adr::SpatialMap;
using adr::Tensor;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, std::uint64_t seed) {
  adr::RandomStream rs(seed);
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rs.uniform(-2.0, 2.0);
  return t;
}

SpatialMap<double> random_map(int H, int W, std::uint64_t seed) {
  FeatureBlock<double> x{random_tensor({3, H, W}, seed), 1};
  return adr::block_attention(x);
}

AttentionProfile<double> make_profile(int model_id, int prediction, int nblocks,
                                      std::uint64_t seed) {
  AttentionProfile<double> p;
  p.model_id = model_id;
  p.prediction = prediction;
  for (int b = 0; b < nblocks; ++b)
    p.blocks.push_back(random_map(3, 3, seed * 100 + static_cast<std::uint64_t>(b)));
  return p;
}

}  // namespace

TEST_CASE("block_attention: single channel reduces to that channel's softmax") {
  FeatureBlock<double> x{random_tensor({1, 3, 4}, 5), 2};
  auto map = adr::block_attention(x);
  auto soft = adr::spatial_softmax(x);
  for (std::size_t i = 0; i < map.values.size(); ++i)
    CHECK(map.values[i] == doctest::Approx(soft.values[i]).epsilon(1e-15));
  double sum = 0.0;
  for (std::size_t i = 0; i < map.values.size(); ++i) sum += map.values[i];
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("block_attention: spatial mass is one for any valid input") {
  for (std::uint64_t seed : {7ULL, 8ULL, 9ULL}) {
    FeatureBlock<double> x{random_tensor({6, 3, 3}, seed), 1};
    auto map = adr::block_attention(x);
    double sum = 0.0;
    for (std::size_t i = 0; i < map.values.size(); ++i) sum += map.values[i];
    CHECK(std::fabs(sum - 1.0) <= 1e-5);
  }
}

TEST_CASE("block_attention: matches the double-loop mean oracle") {
  FeatureBlock<double> x{random_tensor({6, 3, 3}, 11), 1};
  auto map = adr::block_attention(x);
  auto att = adr::spatial_softmax(x);
  for (int h = 0; h < 3; ++h)
    for (int w = 0; w < 3; ++w) {
      double mean = 0.0;
      for (int c = 0; c < 6; ++c) mean += att.values.at3(c, h, w);
      mean /= 6.0;
      CHECK(map.values.at2(h, w) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("divide: groups follow prediction agreement") {
  const int label = 3;
  SUBCASE("all correct") {
    std::vector<AttentionProfile<double>> profiles;
    for (int j = 0; j <= 3; ++j) profiles.push_back(make_profile(j, label, 2, 20 + static_cast<std::uint64_t>(j)));
    auto g = adr::divide(profiles, label);
    CHECK(g.positive == std::vector<int>{0, 1, 2, 3});
    CHECK(g.negative.empty());
  }
  SUBCASE("mixed: predictions (y, y, not-y, y)") {
    std::vector<AttentionProfile<double>> profiles;
    profiles.push_back(make_profile(0, label, 2, 30));
    profiles.push_back(make_profile(1, label, 2, 31));
    profiles.push_back(make_profile(2, label + 1, 2, 32));
    profiles.push_back(make_profile(3, label, 2, 33));
    auto g = adr::divide(profiles, label);
    CHECK(g.positive == std::vector<int>{0, 1, 3});
    CHECK(g.negative == std::vector<int>{2});
  }
  SUBCASE("all wrong") {
    std::vector<AttentionProfile<double>> profiles;
    for (int j = 0; j <= 2; ++j) profiles.push_back(make_profile(j, label + 1, 2, 40 + static_cast<std::uint64_t>(j)));
    auto g = adr::divide(profiles, label);
    CHECK(g.positive.empty());
    CHECK(g.negative == std::vector<int>{0, 1, 2});
  }
  SUBCASE("missing profile is a validation error") {
    std::vector<AttentionProfile<double>> profiles;
    profiles.push_back(make_profile(0, label, 2, 50));
    profiles.push_back(make_profile(2, label, 2, 51));
    CHECK_THROWS_AS(adr::divide(profiles, label), adr::ValidationError);
  }
}

TEST_CASE("assemble: singleton group passes its maps through verbatim") {
  std::vector<AttentionProfile<double>> profiles;
  profiles.push_back(make_profile(0, 1, 3, 60));
  profiles.push_back(make_profile(1, 0, 3, 61));
  auto g = adr::divide(profiles, 1);  // positive = {0}, negative = {1}
  auto t = adr::assemble(profiles, g);
  REQUIRE(t.task_related.has_value());
  REQUIRE(t.domain_related.has_value());
  for (int b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < profiles[0].blocks[static_cast<std::size_t>(b)].values.size(); ++i) {
      CHECK((*t.task_related)[static_cast<std::size_t>(b)].values[i] ==
            profiles[0].blocks[static_cast<std::size_t>(b)].values[i]);
      CHECK((*t.domain_related)[static_cast<std::size_t>(b)].values[i] ==
            profiles[1].blocks[static_cast<std::size_t>(b)].values[i]);
    }
}

TEST_CASE("assemble: empty group yields an absent target and zero loss term") {
  std::vector<AttentionProfile<double>> profiles;
  for (int j = 0; j <= 2; ++j) profiles.push_back(make_profile(j, 5, 2, 70 + static_cast<std::uint64_t>(j)));
  auto g = adr::divide(profiles, 5);  // everyone correct
  auto t = adr::assemble(profiles, g);
  CHECK(t.task_related.has_value());
  CHECK_FALSE(t.domain_related.has_value());
  CHECK(adr::dvr_loss(profiles[0], t) == 0.0);

  // Exactly one of {target present, group empty} holds on each side.
  CHECK(t.task_related.has_value() != g.positive.empty());
  CHECK(t.domain_related.has_value() != g.negative.empty());
}

TEST_CASE("assemble: three models in the group match the brute-force max oracle") {
  std::vector<AttentionProfile<double>> profiles;
  for (int j = 0; j <= 2; ++j) {
    AttentionProfile<double> p;
    p.model_id = j;
    p.prediction = 4;
    p.blocks.push_back(random_map(4, 4, 80 + static_cast<std::uint64_t>(j)));
    profiles.push_back(p);
  }
  auto g = adr::divide(profiles, 4);
  auto t = adr::assemble(profiles, g);
  REQUIRE(t.task_related.has_value());
  for (int p = 0; p < 16; ++p) {
    double best = -1.0;
    for (int j = 0; j <= 2; ++j)
      best = std::max(best, profiles[static_cast<std::size_t>(j)].blocks[0].values[static_cast<std::size_t>(p)]);
    CHECK((*t.task_related)[0].values[static_cast<std::size_t>(p)] == best);
  }
}

TEST_CASE("dir_loss: identity gives zero; hand-evaluated norm matches") {
  AttentionProfile<double> agg = make_profile(0, 1, 2, 90);
  adr::AssembledTargets<double> t;
  t.task_related = agg.blocks;
  CHECK(adr::dir_loss(agg, t) == 0.0);

  AttentionProfile<double> one;
  one.model_id = 0;
  one.prediction = 0;
  one.blocks.push_back(SpatialMap<double>{Tensor<double>({1, 2}, {0.5, 0.5})});
  adr::AssembledTargets<double> t2;
  t2.task_related = std::vector<SpatialMap<double>>{
      SpatialMap<double>{Tensor<double>({1, 2}, {0.1, 0.9})}};
  const double expect = std::sqrt(0.16 + 0.16);
  CHECK(adr::dir_loss(one, t2) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(adr::dir_loss(one, t2) == doctest::Approx(0.5657).epsilon(1e-4));

  // Same numbers through dvr: sign flip.
  adr::AssembledTargets<double> t3;
  t3.domain_related = t2.task_related;
  CHECK(adr::dvr_loss(one, t3) == doctest::Approx(-expect).epsilon(1e-12));
}

TEST_CASE("dir_loss: random profiles match a per-block norm-sum oracle") {
  AttentionProfile<double> agg = make_profile(0, 1, 4, 101);
  adr::AssembledTargets<double> t;
  std::vector<SpatialMap<double>> targets;
  for (int b = 0; b < 4; ++b) targets.push_back(random_map(3, 3, 200 + static_cast<std::uint64_t>(b)));
  t.task_related = targets;

  double expect = 0.0;
  for (int b = 0; b < 4; ++b) {
    double ssq = 0.0;
    for (std::size_t i = 0; i < targets[static_cast<std::size_t>(b)].values.size(); ++i) {
      const double d = agg.blocks[static_cast<std::size_t>(b)].values[i] -
                       targets[static_cast<std::size_t>(b)].values[i];
      ssq += d * d;
    }
    expect += std::sqrt(ssq);
  }
  CHECK(adr::dir_loss(agg, t) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(adr::dir_loss(agg, t) >= 0.0);

  adr::AssembledTargets<double> tneg;
  tneg.domain_related = targets;
  CHECK(adr::dvr_loss(agg, tneg) == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(adr::dvr_loss(agg, tneg) <= 0.0);
}

TEST_CASE("dir_loss: shape mismatch raises a validation error") {
  AttentionProfile<double> agg = make_profile(0, 1, 1, 111);
  adr::AssembledTargets<double> t;
  t.task_related = std::vector<SpatialMap<double>>{SpatialMap<double>{Tensor<double>({4, 4})}};
  CHECK_THROWS_AS(adr::dir_loss(agg, t), adr::ValidationError);
}

TEST_CASE("inter_loss: weighted combination and defaults") {
  CHECK(adr::inter_loss(0.0, 0.0, 2.0, 1.0) == 0.0);
  CHECK(adr::inter_loss(0.5, -0.25, 2.0, 1.0) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK_THROWS_AS(adr::inter_loss(0.1, 0.1, -1.0, 1.0), adr::ParameterError);
}

TEST_CASE("divide/assemble equals exhaustive enumeration over correctness patterns") {
  // S <= 3 models plus the aggregated one, maps <= 3x3: walk all 2^(S+1)
  // correctness patterns and compare against a from-scratch recomputation.
  for (int S : {1, 2, 3}) {
    const int models = S + 1;
    for (int pattern = 0; pattern < (1 << models); ++pattern) {
      std::vector<AttentionProfile<double>> profiles;
      const int label = 2;
      for (int j = 0; j < models; ++j) {
        auto p = make_profile(j, (pattern >> j) & 1 ? label : label + 1, 2,
                              1000 + static_cast<std::uint64_t>(pattern * 10 + j));
        profiles.push_back(p);
      }
      auto g = adr::divide(profiles, label);
      auto t = adr::assemble(profiles, g);

      // Oracle: recompute group membership and maxima directly.
      std::vector<int> pos, neg;
      for (int j = 0; j < models; ++j) ((pattern >> j) & 1 ? pos : neg).push_back(j);
      CHECK(g.positive == pos);
      CHECK(g.negative == neg);
      CHECK(t.task_related.has_value() == !pos.empty());
      CHECK(t.domain_related.has_value() == !neg.empty());
      for (int b = 0; b < 2; ++b) {
        if (!pos.empty())
          for (std::size_t i = 0; i < profiles[0].blocks[static_cast<std::size_t>(b)].values.size(); ++i) {
            double best = -1.0;
            for (int j : pos)
              best = std::max(best, profiles[static_cast<std::size_t>(j)]
                                          .blocks[static_cast<std::size_t>(b)].values[i]);
            CHECK((*t.task_related)[static_cast<std::size_t>(b)].values[i] == best);
          }
        if (!neg.empty())
          for (std::size_t i = 0; i < profiles[0].blocks[static_cast<std::size_t>(b)].values.size(); ++i) {
            double best = -1.0;
            for (int j : neg)
              best = std::max(best, profiles[static_cast<std::size_t>(j)]
                                          .blocks[static_cast<std::size_t>(b)].values[i]);
            CHECK((*t.domain_related)[static_cast<std::size_t>(b)].values[i] == best);
          }
      }
    }
  }
}

TEST_CASE("assemble: permuting domain-specific model order changes nothing") {
  const int label = 1;
  std::vector<AttentionProfile<double>> profiles;
  profiles.push_back(make_profile(0, label, 2, 300));
  profiles.push_back(make_profile(1, label, 2, 301));
  profiles.push_back(make_profile(2, label + 2, 2, 302));
  profiles.push_back(make_profile(3, label, 2, 303));

  auto g1 = adr::divide(profiles, label);
  auto t1 = adr::assemble(profiles, g1);
  const double dir1 = adr::dir_loss(profiles[0], t1);
  const double dvr1 = adr::dvr_loss(profiles[0], t1);

  // Swap the storage order of models 1..3; ids stay attached to their maps.
  std::vector<AttentionProfile<double>> shuffled = {profiles[0], profiles[3], profiles[2],
                                                    profiles[1]};
  auto g2 = adr::divide(shuffled, label);
  auto t2 = adr::assemble(shuffled, g2);
  CHECK(g1.positive == g2.positive);
  CHECK(g1.negative == g2.negative);
  CHECK(adr::dir_loss(profiles[0], t2) == dir1);
  CHECK(adr::dvr_loss(profiles[0], t2) == dvr1);
}

TEST_CASE("inter batch losses: gradients match finite differences; frozen models get none") {
  const int S = 2, B = 2, N = 3, H = 3, W = 3, HW = H * W;
  const int label_of[N] = {0, 1, 2};
  adr::RandomStream rs(777);

  // Feature tensors per model per block; maps derive from them via
  // block_attention so the gradient path includes the softmax.
  std::vector<std::vector<Tensor<double>>> feats(static_cast<std::size_t>(S + 1));
  const int C = 4;
  for (int j = 0; j <= S; ++j)
    for (int b = 0; b < B; ++b)
      feats[static_cast<std::size_t>(j)].push_back(
          random_tensor({N, C, H, W}, 900 + static_cast<std::uint64_t>(j * 10 + b)));

  std::vector<std::vector<int>> predictions = {{0, 1, 1}, {0, 2, 2}, {1, 1, 2}};
  std::vector<int> labels(label_of, label_of + N);

  auto maps_from = [&](const std::vector<std::vector<Tensor<double>>>& f) {
    std::vector<std::vector<Tensor<double>>> maps(static_cast<std::size_t>(S + 1));
    for (int j = 0; j <= S; ++j)
      for (int b = 0; b < B; ++b) {
        Tensor<double> m({N, H, W});
        for (int n = 0; n < N; ++n) {
          Tensor<double> att({C, H, W});
          adr::kernels::spatial_softmax(
              f[static_cast<std::size_t>(j)][static_cast<std::size_t>(b)].data() +
                  static_cast<std::size_t>(n) * C * HW,
              C, HW, att.data());
          for (int p = 0; p < HW; ++p) {
            double mean = 0.0;
            for (int c = 0; c < C; ++c) mean += att[static_cast<std::size_t>(c * HW + p)];
            m[static_cast<std::size_t>(n * HW + p)] = mean / C;
          }
        }
        maps[static_cast<std::size_t>(j)].push_back(std::move(m));
      }
    return maps;
  };

  const double lambda_dir = 2.0, lambda_dvr = 1.0;
  auto total_loss = [&](const std::vector<std::vector<Tensor<double>>>& f) {
    auto maps = maps_from(f);
    auto r = adr::inter_losses_batch<double>(maps, predictions, labels, lambda_dir, lambda_dvr,
                                             nullptr);
    return lambda_dir * r.dir + lambda_dvr * r.dvr;
  };

  // Analytic gradient w.r.t. model 0 features.
  auto maps = maps_from(feats);
  std::vector<Tensor<double>> d_maps;
  for (int b = 0; b < B; ++b) d_maps.push_back(Tensor<double>({N, H, W}));
  adr::inter_losses_batch<double>(maps, predictions, labels, lambda_dir, lambda_dvr, &d_maps);

  for (int b = 0; b < B; ++b) {
    Tensor<double> dfeat({N, C, H, W});
    for (int n = 0; n < N; ++n) {
      Tensor<double> att({C, H, W});
      adr::kernels::spatial_softmax(feats[0][static_cast<std::size_t>(b)].data() +
                                        static_cast<std::size_t>(n) * C * HW,
                                    C, HW, att.data());
      // dV/datt = 1/C per channel.
      Tensor<double> datt({C, H, W});
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < HW; ++p)
          datt[static_cast<std::size_t>(c * HW + p)] =
              d_maps[static_cast<std::size_t>(b)][static_cast<std::size_t>(n * HW + p)] / C;
      adr::kernels::spatial_softmax_backward(att.data(), datt.data(), C, HW,
                                             dfeat.data() + static_cast<std::size_t>(n) * C * HW);
    }

    auto loss_fn = [&](const std::vector<double>& p) {
      auto f2 = feats;
      f2[0][static_cast<std::size_t>(b)] = Tensor<double>(feats[0][static_cast<std::size_t>(b)].shape(), p);
      return total_loss(f2);
    };
    auto res = testsupport::gradcheck(loss_fn, feats[0][static_cast<std::size_t>(b)].vec(),
                                      dfeat.vec(), 1e-6);
    CHECK(res.max_rel_err <= 1e-4);
  }

  // Stop-gradient contract: perturbing a frozen model's features must not be
  // reflected in any gradient w.r.t. model 0, and the implementation computes
  // no gradient for frozen models at all (d_maps only covers model 0). Check
  // numerically that dL/d(frozen features) is not consumed: gradients for
  // model 0 are unchanged when a frozen model's features shift.
  auto f_shift = feats;
  for (std::size_t i = 0; i < f_shift[1][0].size(); ++i) f_shift[1][0][i] += 0.25;
  auto maps_shift = maps_from(f_shift);
  // Targets change, but the gradient *into* frozen maps stays identically
  // zero by construction: inter_losses_batch only writes d_v0.
  std::vector<Tensor<double>> d_maps2;
  for (int b = 0; b < B; ++b) d_maps2.push_back(Tensor<double>({N, H, W}));
  adr::inter_losses_batch<double>(maps_shift, predictions, labels, lambda_dir, lambda_dvr,
                                  &d_maps2);
  CHECK(d_maps2.size() == static_cast<std::size_t>(B));
}
