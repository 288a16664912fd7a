// Command-line front end: dataset generation, the two training stages, the
// leave-one-domain-out evaluation protocol, attention visualization and the
// domain-attention-bias report.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "adr/checkpoint.hpp"
#include "adr/datagen.hpp"
#include "adr/evalviz.hpp"
#include "adr/trainer.hpp"
#include "adr/version.hpp"

namespace fs = std::filesystem;

namespace {

std::string timestamp_dir() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return std::string("runs/") + buf;
}

adr::TrainConfig load_config(const std::string& path) {
  if (path.empty()) return adr::TrainConfig{};
  return adr::parse_train_config(path);
}

nlohmann::json config_json(const adr::TrainConfig& cfg) {
  nlohmann::json j;
  j["preset"] = cfg.preset;
  j["lambda_intra"] = cfg.lambda_intra;
  j["lambda_dir"] = cfg.lambda_dir;
  j["lambda_dvr"] = cfg.lambda_dvr;
  j["topk"] = cfg.topk;
  j["scale"] = cfg.scale;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["weight_decay"] = cfg.weight_decay;
  j["momentum"] = cfg.momentum;
  j["seed"] = cfg.seed;
  j["inter_blocks"] = cfg.inter_blocks;
  j["backbone_blocks"] = cfg.backbone_blocks;
  j["channels"] = cfg.channels;
  j["input_size"] = cfg.input_size;
  j["augment_flip"] = cfg.augment_flip;
  j["augment_crop"] = cfg.augment_crop;
  j["augment_jitter"] = cfg.augment_jitter;
  j["augment_grayscale"] = cfg.augment_grayscale;
  j["precision"] = cfg.precision;
  return j;
}

void write_run_json(const std::string& path, const std::string& command,
                    const adr::TrainConfig& cfg, const nlohmann::json& extra) {
  nlohmann::json j;
  j["command"] = command;
  j["git"] = adr::kGitDescribe;
  j["config"] = config_json(cfg);
  for (auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream f(path);
  f << j.dump(2) << "\n";
}

// Minimal filename glob: '*' and '?' in the final path component.
std::vector<std::string> expand_glob(const std::string& pattern) {
  const fs::path p(pattern);
  const std::string name = p.filename().string();
  if (name.find('*') == std::string::npos && name.find('?') == std::string::npos) {
    if (!fs::exists(p)) throw adr::ValidationError("no such file: " + pattern);
    return {pattern};
  }
  const fs::path dir = p.parent_path().empty() ? fs::path(".") : p.parent_path();
  auto match = [](const std::string& pat, const std::string& s) {
    std::function<bool(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t j) -> bool {
      while (i < pat.size() && pat[i] != '*') {
        if (j >= s.size() || (pat[i] != '?' && pat[i] != s[j])) return false;
        ++i;
        ++j;
      }
      if (i == pat.size()) return j == s.size();
      for (std::size_t k = j; k <= s.size(); ++k)
        if (rec(i + 1, k)) return true;
      return false;
    };
    return rec(0, 0);
  };
  std::vector<std::string> out;
  if (fs::exists(dir))
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && match(name, entry.path().filename().string()))
        out.push_back(entry.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw adr::ValidationError("glob matched no files: " + pattern);
  return out;
}

std::vector<const adr::DomainDataset*> sources_excluding(const std::vector<adr::DomainDataset>& all,
                                                         const std::vector<int>& exclude) {
  std::vector<const adr::DomainDataset*> out;
  for (const auto& ds : all)
    if (std::find(exclude.begin(), exclude.end(), ds.domain_id) == exclude.end())
      out.push_back(&ds);
  return out;
}

template <typename R>
int run_train_specific(const std::string& data_root, int domain, adr::TrainConfig cfg,
                       const std::string& out_path) {
  auto all = adr::load_dataset_tree(data_root);
  const adr::DomainDataset* ds = nullptr;
  for (const auto& d : all)
    if (d.domain_id == domain) ds = &d;
  if (!ds) throw adr::ConfigError(adr::format_msg("domain ", domain, " not present in ", data_root));

  auto out = adr::train_specific<R>(*ds, cfg);
  adr::CheckpointMeta meta;
  meta.stage = 1;
  meta.domain = domain;
  meta.seed = cfg.seed;
  meta.precision = cfg.precision;
  meta.backbone = out.model.backbone.config();
  meta.sce = out.model.sce.cfg;
  adr::save_checkpoint(out_path, out.model, meta);
  adr::write_metrics_csv(out_path + ".metrics.csv", out.metrics);
  nlohmann::json extra;
  extra["data"] = data_root;
  extra["domain"] = domain;
  extra["best_epoch"] = out.best_epoch;
  extra["best_val_accuracy"] = out.best_val_accuracy;
  write_run_json(out_path + ".run.json", "train-specific", cfg, extra);
  std::cout << "wrote " << out_path << " (best val acc " << out.best_val_accuracy << "% at epoch "
            << out.best_epoch << ")\n";
  return 0;
}

template <typename R>
int run_train_aggregated(const std::string& data_root, const std::vector<std::string>& specific,
                         adr::TrainConfig cfg, const std::string& out_path) {
  auto all = adr::load_dataset_tree(data_root);

  std::vector<adr::AdrModel<R>> frozen;
  std::vector<int> frozen_domains;
  for (const auto& path : specific) {
    auto [model, meta] = adr::load_checkpoint<R>(path);
    frozen.push_back(std::move(model));
    frozen_domains.push_back(meta.domain);
  }

  // Sources are every domain in the tree; with inter losses on, each source
  // must have its frozen domain-specific model.
  std::vector<const adr::DomainDataset*> sources;
  for (const auto& ds : all) sources.push_back(&ds);
  if ((cfg.lambda_dir != 0 || cfg.lambda_dvr != 0) && !frozen.empty()) {
    for (const auto* ds : sources)
      if (std::find(frozen_domains.begin(), frozen_domains.end(), ds->domain_id) ==
          frozen_domains.end())
        throw adr::ConfigError(adr::format_msg("missing domain-specific checkpoint for domain ",
                                               ds->domain_id));
  }

  auto out = adr::train_aggregated<R>(sources, frozen, cfg);
  adr::CheckpointMeta meta;
  meta.stage = 2;
  meta.domain = -1;
  meta.seed = cfg.seed;
  meta.precision = cfg.precision;
  meta.backbone = out.model.backbone.config();
  meta.sce = out.model.sce.cfg;
  adr::save_checkpoint(out_path, out.model, meta);
  adr::write_metrics_csv(out_path + ".metrics.csv", out.metrics);
  nlohmann::json extra;
  extra["data"] = data_root;
  extra["specific"] = specific;
  extra["best_epoch"] = out.best_epoch;
  extra["best_val_accuracy"] = out.best_val_accuracy;
  write_run_json(out_path + ".run.json", "train-aggregated", cfg, extra);
  std::cout << "wrote " << out_path << " (best val acc " << out.best_val_accuracy << "% at epoch "
            << out.best_epoch << ")\n";
  return 0;
}

template <typename R>
int run_eval(const std::string& data_root, std::vector<std::string> methods, int seeds,
             adr::TrainConfig cfg, const std::string& out_dir) {
  auto all = adr::load_dataset_tree(data_root);
  fs::create_directories(out_dir);
  auto results = adr::run_protocol<R>(all, methods, seeds, cfg, &std::cout);
  const std::string table = adr::format_results_table(results);
  std::cout << table;
  adr::write_results_csv((fs::path(out_dir) / "results.csv").string(), results);
  std::ofstream tf(fs::path(out_dir) / "results.txt");
  tf << table;
  nlohmann::json extra;
  extra["data"] = data_root;
  extra["methods"] = methods;
  extra["seeds"] = seeds;
  write_run_json((fs::path(out_dir) / "run.json").string(), "eval", cfg, extra);
  std::cout << "results under " << out_dir << "\n";
  return 0;
}

template <typename R>
int run_visualize(const std::string& ckpt, const std::string& images_glob, std::vector<int> blocks,
                  double threshold, const std::string& out_dir) {
  auto [model, meta] = adr::load_checkpoint<R>(ckpt);
  if (blocks.empty())
    for (int b = 1; b <= meta.backbone.blocks; ++b) blocks.push_back(b);
  fs::create_directories(out_dir);
  for (const auto& path : expand_glob(images_glob)) {
    const adr::png::Image img = adr::png::read_file(path);
    auto exports = adr::export_attention(model, img, blocks, threshold);
    const std::string stem = fs::path(path).stem().string();
    for (const auto& e : exports) {
      const std::string base =
          (fs::path(out_dir) / (stem + "_block" + std::to_string(e.block))).string();
      adr::png::write_file(base + ".png", e.overlay);
      adr::write_float_map(base + ".txt", e.raw_map);
    }
    std::cout << "visualized " << path << "\n";
  }
  nlohmann::json extra;
  extra["ckpt"] = ckpt;
  extra["images"] = images_glob;
  extra["blocks"] = blocks;
  extra["threshold"] = threshold;
  extra["colormap"] = "viridis";
  extra["blend_alpha"] = 0.5;
  adr::TrainConfig dummy;
  write_run_json((fs::path(out_dir) / "run.json").string(), "visualize", dummy, extra);
  return 0;
}

template <typename R>
int run_bias_report(const std::vector<std::string>& specific, const std::string& data_root,
                    const std::string& out_dir) {
  if (specific.size() < 2)
    throw adr::ConfigError("bias-report: need at least two domain-specific checkpoints");
  std::vector<adr::AdrModel<R>> models;
  std::vector<int> covered;
  for (const auto& path : specific) {
    auto [model, meta] = adr::load_checkpoint<R>(path);
    models.push_back(std::move(model));
    covered.push_back(meta.domain);
  }
  auto all = adr::load_dataset_tree(data_root);
  auto unseen = sources_excluding(all, covered);
  if (unseen.empty())
    throw adr::ConfigError("bias-report: every domain in the dataset is covered by a checkpoint; "
                           "no unseen domain to probe");
  fs::create_directories(out_dir);

  nlohmann::json summary;
  std::ofstream csv(fs::path(out_dir) / "bias_report.csv");
  csv << "unseen_domain,image_index,model_a,model_b,l2,cosine\n";
  char buf[64];
  for (const auto* ds : unseen) {
    auto rep = adr::attention_bias_report(models, ds->test, ds->image_size);
    for (const auto& p : rep.pairs) {
      std::snprintf(buf, sizeof buf, "%.9g,%.9g", p.l2, p.cosine);
      csv << ds->domain_id << "," << p.image_index << "," << p.model_a << "," << p.model_b << ","
          << buf << "\n";
    }
    nlohmann::json d;
    d["unseen_domain"] = ds->domain_id;
    d["mean_l2"] = rep.mean_l2;
    d["mean_cosine"] = rep.mean_cosine;
    d["images"] = rep.per_image_mean_l2.size();
    summary["domains"].push_back(d);
    std::cout << "unseen domain " << ds->domain_id << ": mean pairwise L2 " << rep.mean_l2
              << ", cosine " << rep.mean_cosine << "\n";
  }
  std::ofstream sf(fs::path(out_dir) / "bias_summary.json");
  sf << summary.dump(2) << "\n";
  std::cout << "report under " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-diversified domain generalization toolkit"};
  app.require_subcommand(1);

  // gen-data ------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain benchmark");
  std::string gen_out = "data";
  std::uint64_t gen_seed = 0;
  int gen_domains = 4, gen_n = 200, gen_classes = 7, gen_size = 64;
  double gen_rho = 0.9;
  gen->add_option("--out", gen_out, "Output dataset root");
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--domains", gen_domains, "Number of domains (>= 2)");
  gen->add_option("--per-domain", gen_n, "Samples per domain");
  gen->add_option("--rho", gen_rho, "Shortcut strength in [0, 1]");
  gen->add_option("--classes", gen_classes, "Class count (2..7)");
  gen->add_option("--image-size", gen_size, "Rendered image size");

  // train-specific -------------------------------------------------------
  auto* ts = app.add_subcommand("train-specific", "Stage 1: train one domain-specific model");
  std::string ts_data, ts_config, ts_out = "specific.ckpt";
  int ts_domain = 0;
  ts->add_option("--domain", ts_domain, "Domain id to train on")->required();
  ts->add_option("--data", ts_data, "Dataset root")->required();
  ts->add_option("--config", ts_config, "key=value config file");
  ts->add_option("--out", ts_out, "Checkpoint output path");

  // train-aggregated -----------------------------------------------------
  auto* ta = app.add_subcommand("train-aggregated", "Stage 2: train the domain-aggregated model");
  std::string ta_data, ta_config, ta_out = "aggregated.ckpt";
  std::vector<std::string> ta_specific;
  ta->add_option("--data", ta_data, "Dataset root")->required();
  ta->add_option("--specific", ta_specific, "Stage-1 checkpoints (one per source domain)");
  ta->add_option("--config", ta_config, "key=value config file");
  ta->add_option("--out", ta_out, "Checkpoint output path");

  // eval ------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Leave-one-domain-out evaluation protocol");
  std::string ev_protocol = "lodo", ev_data, ev_config, ev_out;
  std::vector<std::string> ev_methods = {"baseline", "intra", "i2adr"};
  int ev_seeds = 3;
  ev->add_option("--protocol", ev_protocol, "Protocol name (lodo)");
  ev->add_option("--data", ev_data, "Dataset root")->required();
  ev->add_option("--methods", ev_methods, "Methods to evaluate")->delimiter(',');
  ev->add_option("--seeds", ev_seeds, "Number of seeds");
  ev->add_option("--config", ev_config, "key=value config file");
  ev->add_option("--out", ev_out, "Output directory (default runs/<timestamp>)");

  // visualize ---------------------------------------------------------------
  auto* viz = app.add_subcommand("visualize", "Export attention heatmaps for images");
  std::string viz_ckpt, viz_images, viz_out;
  std::vector<int> viz_blocks;
  double viz_threshold = 0.7;
  viz->add_option("--ckpt", viz_ckpt, "Model checkpoint")->required();
  viz->add_option("--images", viz_images, "PNG path or glob")->required();
  viz->add_option("--blocks", viz_blocks, "Block indices (default: all)")->delimiter(',');
  viz->add_option("--threshold", viz_threshold, "Retain normalized attention >= threshold");
  viz->add_option("--out", viz_out, "Output directory (default runs/<timestamp>)");

  // bias-report ----------------------------------------------------------------
  auto* bias = app.add_subcommand("bias-report", "Pairwise attention divergence of stage-1 models");
  std::vector<std::string> bias_specific;
  std::string bias_data, bias_out;
  bias->add_option("--specific", bias_specific, "Stage-1 checkpoints")->required();
  bias->add_option("--data", bias_data, "Dataset root")->required();
  bias->add_option("--out", bias_out, "Output directory (default runs/<timestamp>)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto data = adr::generate_benchmark(gen_seed, gen_domains, gen_n, gen_rho, gen_classes,
                                          gen_size);
      adr::write_dataset_tree(gen_out, data);
      std::cout << "wrote " << gen_domains << " domains x " << gen_n << " samples to " << gen_out
                << "\n";
      return 0;
    }
    if (ts->parsed()) {
      auto cfg = load_config(ts_config);
      return cfg.precision == "f64" ? run_train_specific<double>(ts_data, ts_domain, cfg, ts_out)
                                    : run_train_specific<float>(ts_data, ts_domain, cfg, ts_out);
    }
    if (ta->parsed()) {
      auto cfg = load_config(ta_config);
      return cfg.precision == "f64"
                 ? run_train_aggregated<double>(ta_data, ta_specific, cfg, ta_out)
                 : run_train_aggregated<float>(ta_data, ta_specific, cfg, ta_out);
    }
    if (ev->parsed()) {
      if (ev_protocol != "lodo")
        throw adr::ParameterError("unknown protocol: " + ev_protocol);
      auto cfg = load_config(ev_config);
      const std::string out = ev_out.empty() ? timestamp_dir() : ev_out;
      return cfg.precision == "f64" ? run_eval<double>(ev_data, ev_methods, ev_seeds, cfg, out)
                                    : run_eval<float>(ev_data, ev_methods, ev_seeds, cfg, out);
    }
    if (viz->parsed()) {
      const std::string out = viz_out.empty() ? timestamp_dir() : viz_out;
      const auto meta = adr::read_sidecar(viz_ckpt + ".meta");
      return meta.precision == "f64"
                 ? run_visualize<double>(viz_ckpt, viz_images, viz_blocks, viz_threshold, out)
                 : run_visualize<float>(viz_ckpt, viz_images, viz_blocks, viz_threshold, out);
    }
    if (bias->parsed()) {
      const std::string out = bias_out.empty() ? timestamp_dir() : bias_out;
      const auto meta = adr::read_sidecar(bias_specific.front() + ".meta");
      return meta.precision == "f64" ? run_bias_report<double>(bias_specific, bias_data, out)
                                     : run_bias_report<float>(bias_specific, bias_data, out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
