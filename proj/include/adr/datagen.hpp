// Deterministic synthetic multi-domain benchmark with a controllable shortcut
// cue. Each domain owns a distinct style recipe (background texture family,
// stroke style, anchor hue) plus a corner patch whose chroma carries the
// shortcut: with probability rho the patch hue encodes the label through a
// domain-specific table, otherwise it is uniform random. Patch corners and
// hue tables differ per domain and patch colors share one luma, so the cue is
// predictive within its own domain, vanishes on a held-out one, and dies
// under grayscale - while the centered class shape transfers everywhere.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adr/common.hpp"
#include "adr/draw.hpp"
#include "adr/png.hpp"
#include "adr/rng.hpp"
#include "adr/tensor.hpp"

namespace adr {

inline constexpr std::uint64_t kTagSample = 0x5a317111;

struct DomainSpec {
  int id = 0;
  draw::Texture texture = draw::Texture::kHStripes;
  double anchor_hue = 0.0;       // background hue anchor (label-independent)
  std::vector<double> fg_hues;   // foreground palette, shared across domains
  draw::Stroke stroke = draw::Stroke::kFilled;
  int cue_corner = 0;            // 0 TL, 1 TR, 2 BL, 3 BR
  std::vector<double> cue_hues;  // label -> patch hue (domain permutation)
  double rho = 0.9;
};

struct SampleRecord {
  std::vector<std::uint8_t> rgb;  // size*size*3
  int label = 0;
  int domain = 0;
};

struct DomainDataset {
  int domain_id = 0;
  std::uint64_t seed = 0;
  int image_size = 64;
  DomainSpec spec;
  std::vector<SampleRecord> train, val, test;

  const std::vector<SampleRecord>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ParameterError("unknown split: " + name);
  }
};

inline std::vector<DomainSpec> make_domain_specs(std::uint64_t seed, int domains, int classes,
                                                 double rho) {
  if (classes < 2 || classes > draw::kShapeCount)
    throw ParameterError(format_msg("datagen: classes must be in [2, ", draw::kShapeCount, "]"));
  std::vector<DomainSpec> specs;
  for (int d = 0; d < domains; ++d) {
    RandomStream rs = RandomStream::derive(seed, 0x57f1e, d);
    DomainSpec s;
    s.id = d;
    s.texture = static_cast<draw::Texture>(d % draw::kTextureCount);
    s.anchor_hue = std::fmod(0.11 + 0.618033988749895 * d, 1.0);
    // Stroke styles shift the shape rendering across domains; geometry is the
    // invariant that has to carry the transfer.
    s.stroke = static_cast<draw::Stroke>(d % draw::kStrokeCount);
    s.cue_corner = d % 4;
    s.rho = rho;
    // The foreground palette is shared across domains: the shape is the
    // task-related feature, and its colors must not be a domain cue.
    for (int i = 0; i < 3; ++i) s.fg_hues.push_back(std::fmod(0.02 + 0.09 * i, 1.0));
    // Shared evenly spaced hue ring, domain-specific assignment + offset.
    auto perm = rs.permutation(classes);
    const double offset = 0.033 * d;
    for (int z = 0; z < classes; ++z)
      s.cue_hues.push_back(std::fmod(static_cast<double>(perm[static_cast<std::size_t>(z)]) /
                                         classes + offset, 1.0));
    specs.push_back(std::move(s));
  }
  return specs;
}

// Cue patch geometry, shared by the renderer and the cue-only probe.
struct CueRect {
  int x0, y0, w, h;
};
inline CueRect cue_rect(int image_size, int corner) {
  const int patch = std::max(6, image_size * 12 / 64);
  const int inset = std::max(1, image_size * 2 / 64);
  const int x0 = (corner == 0 || corner == 2) ? inset : image_size - inset - patch;
  const int y0 = (corner == 0 || corner == 1) ? inset : image_size - inset - patch;
  return {x0, y0, patch, patch};
}

inline std::vector<std::uint8_t> render_sample(int label, const DomainSpec& spec,
                                               RandomStream& rng, int size = 64) {
  if (label < 0 || label >= static_cast<int>(spec.cue_hues.size()))
    throw ParameterError(format_msg("render_sample: label ", label, " outside [0, ",
                                    spec.cue_hues.size(), ")"));
  const double s64 = size / 64.0;
  draw::Canvas canvas(size);

  // Background texture: label-independent domain style, low contrast.
  const draw::Color base = draw::hsv(spec.anchor_hue + rng.uniform(-0.03, 0.03),
                                     0.22 + rng.uniform(0.0, 0.12), 0.42 + rng.uniform(0.0, 0.1));
  const draw::Color alt = {base.r * 0.85, base.g * 0.85, base.b * 0.85};
  const double period = (8.0 + rng.uniform(0.0, 4.0)) * s64;
  const double phase = rng.uniform(0.0, period);
  draw::fill_texture(canvas, spec.texture, base, alt, period, phase);

  // Shortcut cue patch: chroma encodes the label (with probability rho)
  // through the domain's hue table. All patch colors share one luma, so the
  // cue lives in chroma alone and a grayscale transform removes it.
  const int cue_idx = rng.bernoulli(spec.rho)
                          ? label
                          : rng.uniform_int(static_cast<int>(spec.cue_hues.size()));
  const double cue_hue =
      spec.cue_hues[static_cast<std::size_t>(cue_idx)] + rng.uniform(-0.012, 0.012);
  const draw::Color cue = draw::hsv_with_luma(cue_hue, 0.6, 0.45);
  const CueRect cr = cue_rect(size, spec.cue_corner);
  draw::fill_rect(canvas, cr.x0, cr.y0, cr.w, cr.h, cue);

  // Foreground shape (the transferable class feature): bright on the muted
  // background, moderate pose jitter.
  const double cx = size / 2.0 + rng.uniform(-4.0, 4.0) * s64;
  const double cy = size / 2.0 + rng.uniform(-4.0, 4.0) * s64;
  const double radius = (16.0 + rng.uniform(0.0, 5.0)) * s64;
  const double rotation = rng.uniform(-0.2, 0.2);
  const double fg_hue =
      spec.fg_hues[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(spec.fg_hues.size())))] +
      rng.uniform(-0.02, 0.02);
  const draw::Color fg = draw::hsv(fg_hue, 0.8, 0.95);
  draw::draw_shape(canvas, static_cast<draw::Shape>(label), spec.stroke, cx, cy, radius, rotation,
                   fg);

  // Mild pixel noise so no region is bit-constant.
  for (double& v : canvas.rgb) v = std::clamp(v + rng.uniform(-0.015, 0.015), 0.0, 1.0);
  return canvas.to_u8();
}

inline std::vector<DomainDataset> generate_benchmark(std::uint64_t seed, int domains,
                                                     int n_per_domain, double rho, int classes,
                                                     int image_size = 64) {
  if (domains < 2)
    throw ParameterError("generate_benchmark: need at least 2 domains");
  if (n_per_domain < 10)
    throw ParameterError("generate_benchmark: need at least 10 samples per domain for the splits");
  if (rho < 0.0 || rho > 1.0) throw ParameterError("generate_benchmark: rho must be in [0, 1]");

  const auto specs = make_domain_specs(seed, domains, classes, rho);
  const int n_test = n_per_domain * 20 / 100;
  const int n_val = n_per_domain * 10 / 100;
  const int n_train = n_per_domain - n_test - n_val;

  std::vector<DomainDataset> out;
  for (int d = 0; d < domains; ++d) {
    DomainDataset ds;
    ds.domain_id = d;
    ds.seed = seed;
    ds.image_size = image_size;
    ds.spec = specs[static_cast<std::size_t>(d)];
    for (int i = 0; i < n_per_domain; ++i) {
      SampleRecord rec;
      rec.label = i % classes;
      rec.domain = d;
      RandomStream rs = RandomStream::derive(seed, kTagSample, d, i);
      rec.rgb = render_sample(rec.label, ds.spec, rs, image_size);
      if (i < n_train)
        ds.train.push_back(std::move(rec));
      else if (i < n_train + n_val)
        ds.val.push_back(std::move(rec));
      else
        ds.test.push_back(std::move(rec));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

// --- on-disk layout ----------------------------------------------------------
// <root>/<domain>/<split>/<class>/<index>.png + manifest.tsv + spec.json

inline void write_dataset_tree(const std::string& root, const std::vector<DomainDataset>& data) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::ostringstream manifest;
  manifest << "path\tlabel\tdomain\tsplit\n";
  for (const auto& ds : data) {
    for (const std::string split : {"train", "val", "test"}) {
      std::vector<int> counter(64, 0);
      for (const auto& rec : ds.split(split)) {
        const std::string dir = "domain" + std::to_string(ds.domain_id) + "/" + split + "/" +
                                std::to_string(rec.label);
        fs::create_directories(fs::path(root) / dir);
        const int idx = counter[static_cast<std::size_t>(rec.label)]++;
        const std::string rel = dir + "/" + std::to_string(idx) + ".png";
        png::Image img;
        img.width = img.height = ds.image_size;
        img.rgb = rec.rgb;
        png::write_file((fs::path(root) / rel).string(), img);
        manifest << rel << "\t" << rec.label << "\t" << ds.domain_id << "\t" << split << "\n";
      }
    }
  }
  std::ofstream mf(fs::path(root) / "manifest.tsv");
  mf << manifest.str();

  nlohmann::json meta;
  meta["seed"] = data.empty() ? 0 : data.front().seed;
  meta["domains"] = data.size();
  meta["image_size"] = data.empty() ? 64 : data.front().image_size;
  meta["classes"] = data.empty() ? 0 : data.front().spec.cue_hues.size();
  meta["rho"] = data.empty() ? 0.0 : data.front().spec.rho;
  for (const auto& ds : data) {
    nlohmann::json s;
    s["id"] = ds.spec.id;
    s["texture"] = static_cast<int>(ds.spec.texture);
    s["anchor_hue"] = ds.spec.anchor_hue;
    s["fg_hues"] = ds.spec.fg_hues;
    s["stroke"] = static_cast<int>(ds.spec.stroke);
    s["cue_corner"] = ds.spec.cue_corner;
    s["cue_hues"] = ds.spec.cue_hues;
    s["rho"] = ds.spec.rho;
    s["train"] = ds.train.size();
    s["val"] = ds.val.size();
    s["test"] = ds.test.size();
    meta["specs"].push_back(s);
  }
  std::ofstream sf(fs::path(root) / "spec.json");
  sf << meta.dump(2) << "\n";
}

inline std::vector<DomainDataset> load_dataset_tree(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(root) / "manifest.tsv";
  std::ifstream mf(mpath);
  if (!mf) throw ValidationError("datagen: cannot open " + mpath.string());

  std::vector<DomainDataset> out;
  auto domain_slot = [&out](int d) -> DomainDataset& {
    for (auto& ds : out)
      if (ds.domain_id == d) return ds;
    out.emplace_back();
    out.back().domain_id = d;
    return out.back();
  };

  std::string line;
  std::getline(mf, line);  // header
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string rel, split;
    int label, domain;
    if (!(std::getline(ls, rel, '\t') && (ls >> label >> domain >> split)))
      throw ValidationError("datagen: malformed manifest line: " + line);
    const png::Image img = png::read_file((fs::path(root) / rel).string());
    SampleRecord rec;
    rec.rgb = img.rgb;
    rec.label = label;
    rec.domain = domain;
    DomainDataset& ds = domain_slot(domain);
    ds.image_size = img.width;
    if (split == "train")
      ds.train.push_back(std::move(rec));
    else if (split == "val")
      ds.val.push_back(std::move(rec));
    else if (split == "test")
      ds.test.push_back(std::move(rec));
    else
      throw ValidationError("datagen: unknown split in manifest: " + split);
  }
  std::sort(out.begin(), out.end(),
            [](const DomainDataset& a, const DomainDataset& b) { return a.domain_id < b.domain_id; });

  const fs::path spath = fs::path(root) / "spec.json";
  std::ifstream sf(spath);
  if (sf) {
    nlohmann::json meta = nlohmann::json::parse(sf);
    for (auto& ds : out) {
      ds.seed = meta.value("seed", 0ULL);
      for (const auto& s : meta["specs"]) {
        if (s["id"].get<int>() != ds.domain_id) continue;
        ds.spec.id = ds.domain_id;
        ds.spec.texture = static_cast<draw::Texture>(s["texture"].get<int>());
        ds.spec.anchor_hue = s["anchor_hue"].get<double>();
        ds.spec.fg_hues = s["fg_hues"].get<std::vector<double>>();
        ds.spec.stroke = static_cast<draw::Stroke>(s["stroke"].get<int>());
        ds.spec.cue_corner = s["cue_corner"].get<int>();
        ds.spec.cue_hues = s["cue_hues"].get<std::vector<double>>();
        ds.spec.rho = s["rho"].get<double>();
      }
    }
  }
  return out;
}

// --- cue-only probe ------------------------------------------------------------

// Mean RGB over the cue patch rect (the "cue alone" feature).
inline std::array<double, 3> cue_feature(const SampleRecord& rec, int image_size, int corner) {
  const CueRect cr = cue_rect(image_size, corner);
  double sum[3] = {0, 0, 0};
  int count = 0;
  for (int y = cr.y0; y < cr.y0 + cr.h; ++y)
    for (int x = cr.x0; x < cr.x0 + cr.w; ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * image_size + x) * 3;
      for (int c = 0; c < 3; ++c) sum[c] += rec.rgb[i + static_cast<std::size_t>(c)] / 255.0;
      ++count;
    }
  return {sum[0] / count, sum[1] / count, sum[2] / count};
}

// Multinomial logistic probe on the 3-dim cue feature; deterministic
// full-batch gradient descent from zero weights. Returns eval accuracy in %.
inline double cue_probe_accuracy(const std::vector<std::array<double, 3>>& train_x,
                                 const std::vector<int>& train_y,
                                 const std::vector<std::array<double, 3>>& eval_x,
                                 const std::vector<int>& eval_y, int classes, int steps = 600,
                                 double lr = 4.0) {
  const int F = 4;  // 3 features + bias
  std::vector<double> w(static_cast<std::size_t>(classes * F), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(classes));
  std::vector<double> grad(w.size());
  const double inv_n = 1.0 / static_cast<double>(train_x.size());
  for (int step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t n = 0; n < train_x.size(); ++n) {
      const double f[4] = {train_x[n][0], train_x[n][1], train_x[n][2], 1.0};
      double m = -1e30;
      for (int z = 0; z < classes; ++z) {
        double v = 0;
        for (int k = 0; k < F; ++k) v += w[static_cast<std::size_t>(z * F + k)] * f[k];
        logits[static_cast<std::size_t>(z)] = v;
        m = std::max(m, v);
      }
      double denom = 0;
      for (int z = 0; z < classes; ++z) denom += std::exp(logits[static_cast<std::size_t>(z)] - m);
      for (int z = 0; z < classes; ++z) {
        const double p = std::exp(logits[static_cast<std::size_t>(z)] - m) / denom;
        const double err = p - (z == train_y[n] ? 1.0 : 0.0);
        for (int k = 0; k < F; ++k) grad[static_cast<std::size_t>(z * F + k)] += err * f[k];
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * inv_n * grad[i];
  }
  int correct = 0;
  for (std::size_t n = 0; n < eval_x.size(); ++n) {
    const double f[4] = {eval_x[n][0], eval_x[n][1], eval_x[n][2], 1.0};
    int best = 0;
    double bestv = -1e30;
    for (int z = 0; z < classes; ++z) {
      double v = 0;
      for (int k = 0; k < F; ++k) v += w[static_cast<std::size_t>(z * F + k)] * f[k];
      if (v > bestv) {
        bestv = v;
        best = z;
      }
    }
    if (best == eval_y[n]) ++correct;
  }
  return eval_x.empty() ? 0.0 : 100.0 * correct / static_cast<double>(eval_x.size());
}

// --- tensor bridge -------------------------------------------------------------

// Stacks samples into [N, 3, H, W] in [0, 1]; optionally box-downsamples by an
// integer factor (used by the desk preset to train below render resolution).
template <typename R>
Tensor<R> images_to_tensor(const std::vector<const SampleRecord*>& samples, int image_size,
                           int target_size) {
  if (target_size <= 0 || image_size % target_size != 0)
    throw ParameterError(format_msg("images_to_tensor: target ", target_size,
                                    " must divide image size ", image_size));
  const int factor = image_size / target_size;
  const int N = static_cast<int>(samples.size());
  Tensor<R> out({N, 3, target_size, target_size});
  const R inv = R(1) / static_cast<R>(255.0 * factor * factor);
  for (int n = 0; n < N; ++n) {
    const auto& rgb = samples[static_cast<std::size_t>(n)]->rgb;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < target_size; ++y)
        for (int x = 0; x < target_size; ++x) {
          R acc = R(0);
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) {
              const std::size_t i =
                  (static_cast<std::size_t>(y * factor + dy) * image_size + (x * factor + dx)) * 3 +
                  static_cast<std::size_t>(c);
              acc += static_cast<R>(rgb[i]);
            }
          out.at4(n, c, y, x) = acc * inv;
        }
  }
  return out;
}

}  // namespace adr
