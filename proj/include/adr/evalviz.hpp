// Leave-one-domain-out evaluation driver, results tabulation, attention
// heatmap export and the domain-attention-bias report.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adr/trainer.hpp"

namespace adr {

// --- methods -----------------------------------------------------------------

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m = {"baseline", "intra",     "i2adr",
                                             "inter",    "intra_dir", "intra_dvr"};
  return m;
}

inline bool method_needs_stage1(const std::string& m) {
  return m == "i2adr" || m == "inter" || m == "intra_dir" || m == "intra_dvr";
}

// Loss-weight switches for a method, starting from the configured weights.
inline TrainConfig config_for_method(const TrainConfig& base, const std::string& method) {
  TrainConfig c = base;
  if (method == "baseline") {
    c.lambda_intra = 0.0;
    c.lambda_dir = 0.0;
    c.lambda_dvr = 0.0;
  } else if (method == "intra") {
    c.lambda_dir = 0.0;
    c.lambda_dvr = 0.0;
  } else if (method == "i2adr") {
    // full loss
  } else if (method == "inter") {
    c.lambda_intra = 0.0;
  } else if (method == "intra_dir") {
    c.lambda_dvr = 0.0;
  } else if (method == "intra_dvr") {
    c.lambda_dir = 0.0;
  } else {
    throw ParameterError("unknown method: " + method);
  }
  return c;
}

// --- protocol ------------------------------------------------------------------

struct CellResult {
  std::vector<double> per_seed;
  double mean = 0, stddev = 0;

  void finalize() {
    if (per_seed.empty()) return;
    double s = 0;
    for (double v : per_seed) s += v;
    mean = s / static_cast<double>(per_seed.size());
    double ss = 0;
    for (double v : per_seed) ss += (v - mean) * (v - mean);
    stddev = per_seed.size() > 1 ? std::sqrt(ss / static_cast<double>(per_seed.size() - 1)) : 0.0;
  }
};

struct ProtocolResults {
  std::vector<int> domains;                              // held-out column order
  std::vector<std::string> methods;                      // row order
  std::map<std::string, std::map<int, CellResult>> cells;  // method -> held-out -> acc
  std::map<std::string, CellResult> average;             // method -> avg over held-outs
};

// Stage-1 models shared across methods of one protocol invocation.
template <typename R>
using Stage1Cache = std::map<std::pair<int, int>, std::vector<AdrModel<R>>>;  // (held_out, seed_idx)

template <typename R>
std::vector<AdrModel<R>>& stage1_models(Stage1Cache<R>& cache, int held_out, int seed_idx,
                                        const std::vector<const DomainDataset*>& sources,
                                        const TrainConfig& cfg) {
  auto key = std::make_pair(held_out, seed_idx);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::vector<AdrModel<R>> models;
  for (const auto* ds : sources) models.push_back(train_specific<R>(*ds, cfg).model);
  return cache.emplace(key, std::move(models)).first->second;
}

// Trains and evaluates every (method, held-out, seed) cell. `progress`
// receives one line per finished cell when non-null.
template <typename R>
ProtocolResults run_protocol(const std::vector<DomainDataset>& all_domains,
                             const std::vector<std::string>& methods, int seeds,
                             const TrainConfig& base_cfg,
                             std::ostream* progress = nullptr,
                             Stage1Cache<R>* shared_stage1 = nullptr) {
  if (all_domains.size() < 2)
    throw ConfigError("run_protocol: need at least 2 domains for leave-one-domain-out");
  for (const auto& m : methods)
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
      throw ParameterError("run_protocol: unknown method " + m);
  if (all_domains.size() == 2)
    for (const auto& m : methods)
      if (method_needs_stage1(m))
        throw ConfigError("run_protocol: method " + m +
                          " needs Inter-ADR, which requires at least 2 source domains "
                          "(got 1 after holding one out)");

  ProtocolResults results;
  results.methods = methods;
  for (const auto& ds : all_domains) results.domains.push_back(ds.domain_id);

  Stage1Cache<R> local_cache;
  Stage1Cache<R>& cache = shared_stage1 ? *shared_stage1 : local_cache;

  for (int held_out : results.domains) {
    std::vector<const DomainDataset*> sources;
    const DomainDataset* target = nullptr;
    for (const auto& ds : all_domains) {
      if (ds.domain_id == held_out)
        target = &ds;
      else
        sources.push_back(&ds);
    }

    for (int s = 0; s < seeds; ++s) {
      TrainConfig run_cfg = base_cfg;
      run_cfg.seed = base_cfg.seed + static_cast<std::uint64_t>(s);
      for (const auto& method : methods) {
        TrainConfig cfg = config_for_method(run_cfg, method);
        TrainOutcome<R> out;
        if (method_needs_stage1(method)) {
          auto& frozen = stage1_models<R>(cache, held_out, s, sources, run_cfg);
          out = train_aggregated<R>(sources, frozen, cfg);
        } else {
          std::vector<AdrModel<R>> none;
          out = train_aggregated<R>(sources, none, cfg);
        }
        if (out.trained_domains.count(held_out))
          throw ValidationError(format_msg("run_protocol: held-out domain ", held_out,
                                           " leaked into training"));
        const auto [acc, cls] = evaluate_model(out.model, target->test, target->image_size);
        results.cells[method][held_out].per_seed.push_back(acc);
        if (progress)
          (*progress) << "lodo held_out=" << held_out << " method=" << method << " seed=" << s
                      << " test_acc=" << acc << "\n"
                      << std::flush;
      }
    }
  }

  for (auto& [method, per_domain] : results.cells) {
    for (auto& [d, cell] : per_domain) cell.finalize();
    // Per-seed average over held-out domains, then mean/std across seeds.
    CellResult avg;
    const int n_seeds = static_cast<int>(per_domain.begin()->second.per_seed.size());
    for (int s = 0; s < n_seeds; ++s) {
      double acc = 0;
      for (auto& [d, cell] : per_domain) acc += cell.per_seed[static_cast<std::size_t>(s)];
      avg.per_seed.push_back(acc / static_cast<double>(per_domain.size()));
    }
    avg.finalize();
    results.average[method] = avg;
  }
  return results;
}

// Fixed-width text table in the leave-one-domain-out layout: held-out domains
// as columns, "Avg." last.
inline std::string format_results_table(const ProtocolResults& r) {
  std::ostringstream os;
  char buf[64];
  std::string header = "Method";
  header.resize(12, ' ');
  for (int d : r.domains) {
    std::string col = "domain" + std::to_string(d);
    col.resize(14, ' ');
    header += col;
  }
  header += "Avg.";
  os << header << "\n";
  for (const auto& m : r.methods) {
    std::string row = m;
    row.resize(12, ' ');
    for (int d : r.domains) {
      const auto& cell = r.cells.at(m).at(d);
      std::snprintf(buf, sizeof buf, "%.1f+-%.1f", cell.mean, cell.stddev);
      std::string col = buf;
      col.resize(14, ' ');
      row += col;
    }
    const auto& avg = r.average.at(m);
    std::snprintf(buf, sizeof buf, "%.1f+-%.1f", avg.mean, avg.stddev);
    row += buf;
    os << row << "\n";
  }
  return os.str();
}

inline void write_results_csv(const std::string& path, const ProtocolResults& r) {
  std::ofstream f(path);
  if (!f) throw ValidationError("results: cannot write " + path);
  f << "method,held_out,mean_accuracy,std_accuracy,per_seed\n";
  char buf[64];
  auto put = [&](const std::string& m, const std::string& col, const CellResult& cell) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", cell.mean, cell.stddev);
    f << m << "," << col << "," << buf << ",";
    for (std::size_t i = 0; i < cell.per_seed.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.9g", cell.per_seed[i]);
      f << (i ? ";" : "") << buf;
    }
    f << "\n";
  };
  for (const auto& m : r.methods) {
    for (int d : r.domains) put(m, "domain" + std::to_string(d), r.cells.at(m).at(d));
    put(m, "Avg.", r.average.at(m));
  }
}

// --- attention heatmaps ---------------------------------------------------------

namespace detail_viz {

// Anchors of the viridis colormap (CC0), linearly interpolated.
inline draw::Color viridis(double t) {
  static const double anchors[9][3] = {
      {0.267, 0.005, 0.329}, {0.283, 0.141, 0.458}, {0.254, 0.265, 0.530},
      {0.207, 0.372, 0.553}, {0.164, 0.471, 0.558}, {0.128, 0.567, 0.551},
      {0.135, 0.659, 0.518}, {0.267, 0.749, 0.441}, {0.993, 0.906, 0.144}};
  t = std::clamp(t, 0.0, 1.0) * 8.0;
  const int i = std::min(7, static_cast<int>(t));
  const double f = t - i;
  return {anchors[i][0] + (anchors[i + 1][0] - anchors[i][0]) * f,
          anchors[i][1] + (anchors[i + 1][1] - anchors[i][1]) * f,
          anchors[i][2] + (anchors[i + 1][2] - anchors[i][2]) * f};
}

template <typename R>
Tensor<R> bilinear_upsample(const Tensor<R>& map, int out_h, int out_w) {
  const int H = map.dim(0), W = map.dim(1);
  Tensor<R> out({out_h, out_w});
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const double sy = (y + 0.5) * H / out_h - 0.5;
      const double sx = (x + 0.5) * W / out_w - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, H - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, W - 1);
      const int y1 = std::min(y0 + 1, H - 1);
      const int x1 = std::min(x0 + 1, W - 1);
      const double fy = std::clamp(sy - y0, 0.0, 1.0);
      const double fx = std::clamp(sx - x0, 0.0, 1.0);
      const double v = (1 - fy) * ((1 - fx) * map.at2(y0, x0) + fx * map.at2(y0, x1)) +
                       fy * ((1 - fx) * map.at2(y1, x0) + fx * map.at2(y1, x1));
      out.at2(y, x) = static_cast<R>(v);
    }
  return out;
}

}  // namespace detail_viz

// Portable float text: "H W" then H rows of W %.9g values.
template <typename R>
void write_float_map(const std::string& path, const Tensor<R>& map) {
  std::ofstream f(path);
  if (!f) throw ValidationError("visualize: cannot write " + path);
  f << map.dim(0) << " " << map.dim(1) << "\n";
  char buf[48];
  for (int y = 0; y < map.dim(0); ++y) {
    for (int x = 0; x < map.dim(1); ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(map.at2(y, x)));
      f << (x ? " " : "") << buf;
    }
    f << "\n";
  }
}

template <typename R>
Tensor<R> read_float_map(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("visualize: cannot open " + path);
  int h = 0, w = 0;
  f >> h >> w;
  if (h <= 0 || w <= 0) throw ValidationError("visualize: bad map header in " + path);
  Tensor<R> out({h, w});
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v;
    if (!(f >> v)) throw ValidationError("visualize: truncated map in " + path);
    out[i] = static_cast<R>(v);
  }
  return out;
}

// Min-max normalization; a constant map keeps every pixel (all ones).
template <typename R>
Tensor<R> minmax_normalize(const Tensor<R>& map) {
  R lo = map[0], hi = map[0];
  for (std::size_t i = 0; i < map.size(); ++i) {
    lo = std::min(lo, map[i]);
    hi = std::max(hi, map[i]);
  }
  Tensor<R> out(map.shape());
  if (hi - lo <= R(0)) {
    out.fill(R(1));
    return out;
  }
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - lo) / (hi - lo);
  return out;
}

template <typename R>
struct AttentionExport {
  int block = 0;
  Tensor<R> raw_map;         // block attention at tap resolution
  Tensor<R> retained;        // normalized + thresholded, tap resolution
  png::Image overlay;        // blended heatmap at input resolution
};

// Fig.-3-style protocol: block attention -> min-max normalize -> retain the
// top values (>= threshold) -> bilinear upsample -> alpha-blend over input.
template <typename R>
std::vector<AttentionExport<R>> export_attention(AdrModel<R>& model, const png::Image& image,
                                                 const std::vector<int>& blocks, double threshold,
                                                 double alpha = 0.5) {
  if (threshold < 0.0 || threshold > 1.0)
    throw ParameterError("export_attention: threshold must be in [0, 1]");
  const BackboneConfig& cfg = model.backbone.config();
  const int B = cfg.blocks;
  for (int b : blocks)
    if (b < 1 || b > B)
      throw ParameterError(format_msg("export_attention: unknown block index ", b,
                                      " (model has ", B, ")"));

  SampleRecord rec;
  rec.rgb = image.rgb;
  Tensor<R> x = images_to_tensor<R>({&rec}, image.width, cfg.input_h);
  std::vector<Tensor<R>> taps;
  model.backbone.forward_with_taps(x, Mode::kEval, taps, nullptr);

  std::vector<AttentionExport<R>> out;
  for (int b : blocks) {
    AttentionExport<R> e;
    e.block = b;
    Tensor<R> batched = batch_block_attention<R>(taps[static_cast<std::size_t>(b - 1)],
                                                 static_cast<Tensor<R>*>(nullptr));
    e.raw_map = Tensor<R>({batched.dim(1), batched.dim(2)}, batched.vec());

    Tensor<R> norm = minmax_normalize(e.raw_map);
    e.retained = norm;
    for (std::size_t i = 0; i < e.retained.size(); ++i)
      if (e.retained[i] < static_cast<R>(threshold)) e.retained[i] = R(0);

    Tensor<R> up = detail_viz::bilinear_upsample(e.retained, image.height, image.width);
    e.overlay.width = image.width;
    e.overlay.height = image.height;
    e.overlay.rgb = image.rgb;
    for (int y = 0; y < image.height; ++y)
      for (int x2 = 0; x2 < image.width; ++x2) {
        const double v = static_cast<double>(up.at2(y, x2));
        if (v <= 0.0) continue;
        const draw::Color c = detail_viz::viridis(v);
        const std::size_t i = (static_cast<std::size_t>(y) * image.width + x2) * 3;
        auto blend = [&](std::size_t idx, double cv) {
          const double base = e.overlay.rgb[idx] / 255.0;
          const double mixed = base * (1.0 - alpha) + cv * alpha;
          e.overlay.rgb[idx] = static_cast<std::uint8_t>(std::lround(std::clamp(mixed, 0.0, 1.0) * 255.0));
        };
        blend(i, c.r);
        blend(i + 1, c.g);
        blend(i + 2, c.b);
      }
    out.push_back(std::move(e));
  }
  return out;
}

// --- domain attention bias report -----------------------------------------------

struct BiasPair {
  int image_index = 0;
  int model_a = 0, model_b = 0;
  double l2 = 0, cosine = 0;
};

struct BiasReport {
  std::vector<BiasPair> pairs;
  std::vector<double> per_image_mean_l2;
  double mean_l2 = 0, mean_cosine = 0;
};

template <typename R>
double map_l2_distance(const Tensor<R>& a, const Tensor<R>& b) {
  if (!a.same_shape(b)) throw ValidationError("map distance: shape mismatch");
  double ssq = 0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    const double d = static_cast<double>(a[p]) - static_cast<double>(b[p]);
    ssq += d * d;
  }
  return std::sqrt(ssq);
}

template <typename R>
double map_cosine_distance(const Tensor<R>& a, const Tensor<R>& b) {
  if (!a.same_shape(b)) throw ValidationError("map distance: shape mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    const double va = static_cast<double>(a[p]);
    const double vb = static_cast<double>(b[p]);
    dot += va * vb;
    na += va * va;
    nb += vb * vb;
  }
  return (na > 0 && nb > 0) ? 1.0 - dot / (std::sqrt(na) * std::sqrt(nb)) : 0.0;
}

// Pairwise distances between the final-block attention maps of the given
// models over a set of samples.
template <typename R>
BiasReport attention_bias_report(std::vector<AdrModel<R>>& models,
                                 const std::vector<SampleRecord>& samples, int image_size) {
  if (models.size() < 2)
    throw ConfigError("bias report: need at least two domain-specific checkpoints");
  BiasReport rep;
  const int M = static_cast<int>(models.size());
  double total_l2 = 0, total_cos = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<Tensor<R>> maps;
    for (auto& m : models) {
      Tensor<R> x = images_to_tensor<R>({&samples[i]}, image_size, m.backbone.config().input_h);
      std::vector<Tensor<R>> taps;
      m.backbone.forward_with_taps(x, Mode::kEval, taps, nullptr);
      maps.push_back(batch_block_attention<R>(taps.back(), static_cast<Tensor<R>*>(nullptr)));
    }
    double image_l2 = 0;
    int image_pairs = 0;
    for (int a = 0; a < M; ++a)
      for (int b = a + 1; b < M; ++b) {
        const double l2 =
            map_l2_distance(maps[static_cast<std::size_t>(a)], maps[static_cast<std::size_t>(b)]);
        const double cosine = map_cosine_distance(maps[static_cast<std::size_t>(a)],
                                                  maps[static_cast<std::size_t>(b)]);
        rep.pairs.push_back({static_cast<int>(i), a, b, l2, cosine});
        total_l2 += l2;
        total_cos += cosine;
        image_l2 += l2;
        ++image_pairs;
        ++count;
      }
    rep.per_image_mean_l2.push_back(image_l2 / std::max(1, image_pairs));
  }
  rep.mean_l2 = count ? total_l2 / static_cast<double>(count) : 0.0;
  rep.mean_cosine = count ? total_cos / static_cast<double>(count) : 0.0;
  return rep;
}

// One-sided sign test: P[Binomial(n, 1/2) >= wins] for wins successes among n
// non-tied paired comparisons.
inline double sign_test_p_value(int wins, int n) {
  if (n <= 0) return 1.0;
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    double log_c = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    p += std::exp(log_c - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace adr
