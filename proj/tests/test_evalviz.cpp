#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "adr/evalviz.hpp"

using adr::DomainDataset;
using adr::Tensor;
using adr::TrainConfig;

namespace {

TrainConfig fast_config() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  cfg.backbone_blocks = 2;
  cfg.channels = {4, 8};
  cfg.input_size = 16;
  cfg.topk = 3;
  cfg.seed = 3;
  return cfg;
}

adr::AdrModel<float> quick_model(const DomainDataset& ds) {
  TrainConfig cfg = fast_config();
  cfg.epochs = 1;
  return adr::train_specific<float>(ds, cfg).model;
}

}  // namespace

TEST_CASE("minmax_normalize: constant maps keep every pixel") {
  Tensor<float> flat = Tensor<float>::full({3, 3}, 0.42f);
  auto norm = adr::minmax_normalize(flat);
  for (std::size_t i = 0; i < norm.size(); ++i) CHECK(norm[i] == 1.0f);
}

TEST_CASE("export_attention: threshold semantics") {
  auto data = adr::generate_benchmark(51, 2, 12, 0.9, 7);
  auto model = quick_model(data[0]);
  adr::png::Image img;
  img.width = img.height = data[0].image_size;
  img.rgb = data[0].test[0].rgb;

  SUBCASE("threshold 0 retains the full heatmap") {
    auto exports = adr::export_attention(model, img, {1, 2}, 0.0);
    REQUIRE(exports.size() == 2);
    for (const auto& e : exports)
      for (std::size_t i = 0; i < e.retained.size(); ++i) CHECK(e.retained[i] >= 0.0f);
    // Normalized map has max 1, min 0; with threshold 0 nothing is zeroed out
    // beyond the minimum itself.
    int nonzero = 0;
    for (std::size_t i = 0; i < exports[0].retained.size(); ++i)
      if (exports[0].retained[i] > 0) ++nonzero;
    CHECK(nonzero >= static_cast<int>(exports[0].retained.size()) - 2);
  }

  SUBCASE("threshold 1 keeps only the argmax pixel(s)") {
    auto exports = adr::export_attention(model, img, {2}, 1.0);
    int kept = 0;
    for (std::size_t i = 0; i < exports[0].retained.size(); ++i)
      if (exports[0].retained[i] > 0) ++kept;
    CHECK(kept >= 1);
    // Only pixels at the normalized maximum survive.
    for (std::size_t i = 0; i < exports[0].retained.size(); ++i)
      if (exports[0].retained[i] > 0) CHECK(exports[0].retained[i] == 1.0f);
  }

  SUBCASE("unknown block index is a parameter error") {
    CHECK_THROWS_AS(adr::export_attention(model, img, {5}, 0.5), adr::ParameterError);
  }

  SUBCASE("raw map round-trips through portable float text within 1e-6") {
    namespace fs = std::filesystem;
    auto exports = adr::export_attention(model, img, {1}, 0.0);
    const std::string path = (fs::temp_directory_path() / "adr_map_test.txt").string();
    adr::write_float_map(path, exports[0].raw_map);
    auto back = adr::read_float_map<float>(path);
    REQUIRE(back.shape() == exports[0].raw_map.shape());
    for (std::size_t i = 0; i < back.size(); ++i)
      CHECK(std::fabs(static_cast<double>(back[i]) -
                      static_cast<double>(exports[0].raw_map[i])) <= 1e-6);
    fs::remove(path);
  }
}

TEST_CASE("bias report: identical checkpoints give all-zero pairwise distances") {
  auto data = adr::generate_benchmark(53, 2, 12, 0.9, 7);
  auto model = quick_model(data[0]);
  std::vector<adr::AdrModel<float>> models = {model, model};
  std::vector<adr::SampleRecord> samples(data[1].test.begin(), data[1].test.begin() + 2);
  auto rep = adr::attention_bias_report(models, samples, data[1].image_size);
  REQUIRE_FALSE(rep.pairs.empty());
  for (const auto& p : rep.pairs) {
    CHECK(p.l2 == 0.0);
    CHECK(std::fabs(p.cosine) <= 1e-12);
  }
  CHECK(rep.mean_l2 == 0.0);
}

TEST_CASE("map distances: hand arithmetic") {
  Tensor<float> a({2, 2}, {1, 0, 0, 0});
  Tensor<float> b({2, 2}, {0, 0, 0, 1});
  CHECK(adr::map_l2_distance(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(adr::map_cosine_distance(a, b) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(adr::map_l2_distance(a, Tensor<float>({2, 3})), adr::ValidationError);
}

TEST_CASE("sign test: exact binomial tail") {
  // All 10 of 10 wins: p = 2^-10.
  CHECK(adr::sign_test_p_value(10, 10) == doctest::Approx(std::pow(0.5, 10)).epsilon(1e-12));
  // 5 of 10: p > 0.5.
  CHECK(adr::sign_test_p_value(5, 10) > 0.5);
  CHECK(adr::sign_test_p_value(0, 10) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("run_protocol: two-domain benchmark rejects inter methods by name") {
  auto data = adr::generate_benchmark(55, 2, 20, 0.9, 7);
  TrainConfig cfg = fast_config();
  CHECK_THROWS_WITH_AS(
      (adr::run_protocol<float>(data, {"i2adr"}, 1, cfg)),
      doctest::Contains("source domains"), adr::ConfigError);
  CHECK_THROWS_AS((adr::run_protocol<float>(data, {"nonsense"}, 1, cfg)), adr::ParameterError);
}

TEST_CASE("run_protocol: baseline-only run produces a complete table without leakage") {
  auto data = adr::generate_benchmark(57, 3, 20, 0.9, 7);
  TrainConfig cfg = fast_config();
  auto results = adr::run_protocol<float>(data, {"baseline"}, 2, cfg);
  REQUIRE(results.domains.size() == 3);
  for (int d : results.domains) {
    const auto& cell = results.cells.at("baseline").at(d);
    CHECK(cell.per_seed.size() == 2);
    for (double acc : cell.per_seed) {
      CHECK(acc >= 0.0);
      CHECK(acc <= 100.0);
    }
  }
  CHECK(results.average.at("baseline").per_seed.size() == 2);

  const std::string table = adr::format_results_table(results);
  CHECK(table.find("Method") != std::string::npos);
  CHECK(table.find("Avg.") != std::string::npos);
  CHECK(table.find("baseline") != std::string::npos);

  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "adr_results_test.csv").string();
  adr::write_results_csv(path, results);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "method,held_out,mean_accuracy,std_accuracy,per_seed");
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);  // 3 held-out rows + Avg.
  fs::remove(path);
}

TEST_CASE("config_for_method: weight switches per method") {
  TrainConfig base;
  base.lambda_intra = 0.005;
  base.lambda_dir = 2;
  base.lambda_dvr = 1;
  auto b = adr::config_for_method(base, "baseline");
  CHECK((b.lambda_intra == 0 && b.lambda_dir == 0 && b.lambda_dvr == 0));
  auto i = adr::config_for_method(base, "intra");
  CHECK((i.lambda_intra == 0.005 && i.lambda_dir == 0 && i.lambda_dvr == 0));
  auto full = adr::config_for_method(base, "i2adr");
  CHECK((full.lambda_intra == 0.005 && full.lambda_dir == 2 && full.lambda_dvr == 1));
  auto inter = adr::config_for_method(base, "inter");
  CHECK((inter.lambda_intra == 0 && inter.lambda_dir == 2 && inter.lambda_dvr == 1));
  auto id = adr::config_for_method(base, "intra_dir");
  CHECK((id.lambda_intra == 0.005 && id.lambda_dir == 2 && id.lambda_dvr == 0));
  auto iv = adr::config_for_method(base, "intra_dvr");
  CHECK((iv.lambda_intra == 0.005 && iv.lambda_dir == 0 && iv.lambda_dvr == 1));
}
