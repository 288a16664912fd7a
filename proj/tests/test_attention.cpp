#include <doctest.h>

#include <cmath>
#include <vector>

#include "adr/attention.hpp"
#include "adr/rng.hpp"
#include "support/gradcheck.hpp"

using adr::FeatureBlock;
using adr::InChannelAttention;
using adr::SpatialMap;
using adr::Tensor;

namespace {

FeatureBlock<double> random_block(int C, int H, int W, std::uint64_t seed) {
  adr::RandomStream rs(seed);
  Tensor<double> t({C, H, W});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rs.uniform(-2.0, 2.0);
  return {t, 1};
}

InChannelAttention<double> random_attention(int C, int H, int W, std::uint64_t seed) {
  return adr::spatial_softmax(random_block(C, H, W, seed));
}

}  // namespace

TEST_CASE("spatial_softmax: uniform channel becomes uniform attention") {
  for (double v : {-3.0, 0.0, 7.5}) {
    FeatureBlock<double> x{Tensor<double>::full({1, 2, 2}, v), 1};
    auto a = adr::spatial_softmax(x);
    for (std::size_t i = 0; i < a.values.size(); ++i)
      CHECK(a.values[i] == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("spatial_softmax: [0, ln 3] evaluates to [0.25, 0.75]") {
  FeatureBlock<double> x{Tensor<double>({1, 1, 2}, {0.0, std::log(3.0)}), 1};
  auto a = adr::spatial_softmax(x);
  CHECK(a.values[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(a.values[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("spatial_softmax: per-channel constant shift invariance") {
  auto x = random_block(3, 4, 5, 11);
  auto base = adr::spatial_softmax(x);
  FeatureBlock<double> shifted = x;
  for (int c = 0; c < 3; ++c) {
    const double offset = 10.0 * (c + 1);
    for (int p = 0; p < 20; ++p) shifted.values[static_cast<std::size_t>(c) * 20 + p] += offset;
  }
  auto moved = adr::spatial_softmax(shifted);
  for (std::size_t i = 0; i < base.values.size(); ++i)
    CHECK(std::fabs(base.values[i] - moved.values[i]) <= 1e-12);
}

TEST_CASE("spatial_softmax: channels sum to one and stay strictly positive") {
  auto a = random_attention(6, 3, 7, 42);
  for (int c = 0; c < 6; ++c) {
    double sum = 0.0;
    for (int p = 0; p < 21; ++p) {
      const double v = a.values[static_cast<std::size_t>(c) * 21 + p];
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("spatial_softmax: raising one pixel raises its attention, lowers the rest") {
  auto x = random_block(1, 3, 3, 7);
  auto before = adr::spatial_softmax(x);
  auto bumped = x;
  bumped.values[4] += 0.5;
  auto after = adr::spatial_softmax(bumped);
  for (int p = 0; p < 9; ++p) {
    if (p == 4)
      CHECK(after.values[static_cast<std::size_t>(p)] > before.values[static_cast<std::size_t>(p)]);
    else
      CHECK(after.values[static_cast<std::size_t>(p)] < before.values[static_cast<std::size_t>(p)]);
  }
}

TEST_CASE("spatial_softmax: rejects non-finite input naming the offending index") {
  auto x = random_block(2, 2, 3, 3);
  x.values.at3(1, 0, 2) = std::nan("");
  CHECK_THROWS_WITH_AS(adr::spatial_softmax(x),
                       doctest::Contains("(1,0,2)"), adr::ValidationError);
}

TEST_CASE("cross_channel_max: single channel passes through verbatim") {
  auto a = random_attention(1, 3, 4, 5);
  auto m = adr::cross_channel_max(a);
  for (std::size_t i = 0; i < m.values.size(); ++i) CHECK(m.values[i] == a.values[i]);
}

TEST_CASE("cross_channel_max: elementwise max by inspection") {
  InChannelAttention<double> a{Tensor<double>({2, 1, 2}, {0.7, 0.3, 0.2, 0.8})};
  auto m = adr::cross_channel_max(a);
  CHECK(m.values[0] == doctest::Approx(0.7));
  CHECK(m.values[1] == doctest::Approx(0.8));
}

TEST_CASE("cross_channel_max: matches exhaustive triple-loop oracle") {
  auto a = random_attention(8, 3, 3, 99);
  auto m = adr::cross_channel_max(a);
  for (int h = 0; h < 3; ++h)
    for (int w = 0; w < 3; ++w) {
      double best = -1.0;
      for (int c = 0; c < 8; ++c) best = std::max(best, a.values.at3(c, h, w));
      CHECK(m.values.at2(h, w) == best);
    }
}

TEST_CASE("topk_mean: k=1 is bitwise identical to cross_channel_max") {
  auto a = random_attention(9, 4, 4, 1234);
  auto top1 = adr::topk_mean(a, 1);
  auto cmax = adr::cross_channel_max(a);
  for (std::size_t i = 0; i < top1.values.size(); ++i)
    CHECK(top1.values[i] == cmax.values[i]);
}

TEST_CASE("topk_mean: k=C yields a unit-mass map") {
  auto a = random_attention(5, 4, 3, 321);
  auto m = adr::topk_mean(a, 5);
  double total = 0.0;
  for (std::size_t i = 0; i < m.values.size(); ++i) total += m.values[i];
  // Mean over channels of per-channel distributions carries mass 1.
  CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("topk_mean: sort-and-average oracle at one pixel") {
  // Values 0.1, 0.4, 0.3, 0.2 at the only pixel; top-2 mean = 0.35.
  InChannelAttention<double> a{Tensor<double>({4, 1, 1}, {0.1, 0.4, 0.3, 0.2})};
  auto m = adr::topk_mean(a, 2);
  CHECK(m.values[0] == doctest::Approx(0.35).epsilon(1e-12));
}

TEST_CASE("topk_mean: random maps match an independent per-pixel sort oracle") {
  auto a = random_attention(12, 5, 4, 777);
  for (int k : {1, 3, 7, 12}) {
    auto m = adr::topk_mean(a, k);
    for (int h = 0; h < 5; ++h)
      for (int w = 0; w < 4; ++w) {
        std::vector<double> col;
        for (int c = 0; c < 12; ++c) col.push_back(a.values.at3(c, h, w));
        std::sort(col.begin(), col.end(), std::greater<double>());
        double mean = 0.0;
        for (int r = 0; r < k; ++r) mean += col[static_cast<std::size_t>(r)];
        mean /= k;
        CHECK(m.values.at2(h, w) == doctest::Approx(mean).epsilon(1e-12));
      }
  }
}

TEST_CASE("topk_mean: k out of range raises a parameter error") {
  auto a = random_attention(4, 2, 2, 9);
  CHECK_THROWS_AS(adr::topk_mean(a, 0), adr::ParameterError);
  CHECK_THROWS_AS(adr::topk_mean(a, 5), adr::ParameterError);
}

TEST_CASE("cross_model_max: single map passes through; empty list signals absence") {
  auto a = random_attention(3, 2, 2, 21);
  auto map = adr::topk_mean(a, 3);
  auto merged = adr::cross_model_max<double>({map});
  REQUIRE(merged.has_value());
  for (std::size_t i = 0; i < map.values.size(); ++i)
    CHECK(merged->values[i] == map.values[i]);

  CHECK_FALSE(adr::cross_model_max<double>({}).has_value());
}

TEST_CASE("cross_model_max: elementwise max by inspection") {
  SpatialMap<double> m1{Tensor<double>({1, 2}, {0.1, 0.9})};
  SpatialMap<double> m2{Tensor<double>({1, 2}, {0.5, 0.2})};
  auto u = adr::cross_model_max<double>({m1, m2});
  REQUIRE(u.has_value());
  CHECK(u->values[0] == doctest::Approx(0.5));
  CHECK(u->values[1] == doctest::Approx(0.9));
}

TEST_CASE("cross_model_max: five random maps match the brute-force oracle") {
  std::vector<SpatialMap<double>> maps;
  for (int j = 0; j < 5; ++j)
    maps.push_back(adr::topk_mean(random_attention(4, 4, 4, 50 + static_cast<std::uint64_t>(j)), 2));
  auto u = adr::cross_model_max(maps);
  REQUIRE(u.has_value());
  for (int p = 0; p < 16; ++p) {
    double best = -1.0;
    for (const auto& m : maps) best = std::max(best, m.values[static_cast<std::size_t>(p)]);
    CHECK(u->values[static_cast<std::size_t>(p)] == best);
  }
}

TEST_CASE("cross_model_max: shape mismatch raises a validation error") {
  SpatialMap<double> m1{Tensor<double>({2, 2})};
  SpatialMap<double> m2{Tensor<double>({2, 3})};
  CHECK_THROWS_AS(adr::cross_model_max<double>({m1, m2}), adr::ValidationError);
}

TEST_CASE("operators are permutation-equivariant in the channel/model axis") {
  const int C = 6, H = 3, W = 3;
  auto x = random_block(C, H, W, 2024);
  adr::RandomStream rs(88);
  auto perm = rs.permutation(C);

  FeatureBlock<double> xp{Tensor<double>({C, H, W}), 1};
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p)
      xp.values[static_cast<std::size_t>(c) * (H * W) + p] =
          x.values[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)]) * (H * W) + p];

  auto a = adr::spatial_softmax(x);
  auto ap = adr::spatial_softmax(xp);
  for (int k : {1, 2, C}) {
    auto m = adr::topk_mean(a, k);
    auto mp = adr::topk_mean(ap, k);
    for (std::size_t i = 0; i < m.values.size(); ++i) CHECK(m.values[i] == mp.values[i]);
  }
  auto cm = adr::cross_channel_max(a);
  auto cmp = adr::cross_channel_max(ap);
  for (std::size_t i = 0; i < cm.values.size(); ++i) CHECK(cm.values[i] == cmp.values[i]);

  // Model-axis permutation.
  std::vector<SpatialMap<double>> maps;
  for (int j = 0; j < 4; ++j)
    maps.push_back(adr::topk_mean(random_attention(3, H, W, 400 + static_cast<std::uint64_t>(j)), 2));
  auto mperm = rs.permutation(4);
  std::vector<SpatialMap<double>> shuffled;
  for (int j = 0; j < 4; ++j) shuffled.push_back(maps[static_cast<std::size_t>(mperm[static_cast<std::size_t>(j)])]);
  auto u = adr::cross_model_max(maps);
  auto up = adr::cross_model_max(shuffled);
  for (std::size_t i = 0; i < u->values.size(); ++i) CHECK(u->values[i] == up->values[i]);
}

namespace {

// True when any per-pixel channel pair sits within `tol` of a tie among the
// top k+1 order statistics; such inputs lie on a subgradient boundary.
bool near_topk_tie(const Tensor<double>& att, int k, double tol) {
  const int C = att.dim(0);
  const int HW = att.dim(1) * att.dim(2);
  for (int p = 0; p < HW; ++p) {
    std::vector<double> col;
    for (int c = 0; c < C; ++c) col.push_back(att[static_cast<std::size_t>(c) * HW + p]);
    std::sort(col.begin(), col.end(), std::greater<double>());
    const int upto = std::min(k + 1, C);
    for (int r = 1; r < upto; ++r)
      if (col[static_cast<std::size_t>(r - 1)] - col[static_cast<std::size_t>(r)] < tol) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("operator gradients match central finite differences") {
  // h(X) = <G, op(softmax(X))> for a fixed random G, checked coordinate-wise.
  const int C = 4, H = 5, W = 5, HW = H * W;
  int done = 0;
  std::uint64_t seed = 9000;
  while (done < 5) {
    auto x = random_block(C, H, W, seed++);
    auto att = adr::spatial_softmax(x).values;
    if (near_topk_tie(att, 2, 1e-3)) continue;
    ++done;

    adr::RandomStream gs(seed * 131);
    Tensor<double> g({H, W});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = gs.uniform(-1.0, 1.0);

    for (int k : {1, 2}) {
      auto loss = [&](const std::vector<double>& params) {
        Tensor<double> xt({C, H, W}, params);
        Tensor<double> a({C, H, W});
        adr::kernels::spatial_softmax(xt.data(), C, HW, a.data());
        Tensor<double> m({H, W});
        adr::kernels::topk_mean(a.data(), C, HW, k, m.data(), nullptr);
        double v = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) v += m[i] * g[i];
        return v;
      };

      // Analytic: topk backward into dA, then softmax backward into dX.
      Tensor<double> da({C, H, W});
      adr::kernels::topk_mean_backward(att.data(), g.data(), C, HW, k, da.data());
      Tensor<double> dx({C, H, W});
      adr::kernels::spatial_softmax_backward(att.data(), da.data(), C, HW, dx.data());

      auto res = testsupport::gradcheck(loss, x.values.vec(), dx.vec(), 1e-6);
      CHECK_MESSAGE(res.max_rel_err <= 1e-4,
                    "k=", k, " worst=", res.worst_index, " analytic=", res.analytic_at_worst,
                    " numeric=", res.numeric_at_worst);
    }

    // cross_channel_max gradient (k=1 path shares the kernel, but exercise the
    // dedicated backward too).
    auto loss_max = [&](const std::vector<double>& params) {
      Tensor<double> xt({C, H, W}, params);
      Tensor<double> a({C, H, W});
      adr::kernels::spatial_softmax(xt.data(), C, HW, a.data());
      Tensor<double> m({H, W});
      adr::kernels::cross_channel_max(a.data(), C, HW, m.data());
      double v = 0.0;
      for (std::size_t i = 0; i < m.size(); ++i) v += m[i] * g[i];
      return v;
    };
    Tensor<double> da({C, H, W});
    adr::kernels::cross_channel_max_backward(att.data(), g.data(), C, HW, da.data());
    Tensor<double> dx({C, H, W});
    adr::kernels::spatial_softmax_backward(att.data(), da.data(), C, HW, dx.data());
    auto res = testsupport::gradcheck(loss_max, x.values.vec(), dx.vec(), 1e-6);
    CHECK(res.max_rel_err <= 1e-4);
  }
}
