// Checkpoint I/O: binary tensor container plus a plain-text sidecar with the
// architecture, stage, domain, seed and source revision. The binary layout is
// little-endian and versioned; loading validates names and shapes.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "adr/common.hpp"
#include "adr/model.hpp"
#include "adr/version.hpp"

namespace adr {

struct CheckpointMeta {
  int stage = 1;
  int domain = -1;  // -1 = aggregated
  std::uint64_t seed = 0;
  std::string git = kGitDescribe;
  std::string precision = "f32";
  BackboneConfig backbone;
  SCEConfig sce;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'A', 'D', 'R', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

template <typename R>
std::vector<std::uint8_t> serialize_model(AdrModel<R>& model) {
  std::ostringstream os(std::ios::binary);
  os.write(detail::kCkptMagic, 8);
  auto params = model.params();
  auto buffers = model.buffers();
  detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(params.size() + buffers.size()));
  auto put_tensor = [&os](const std::string& name, const Tensor<R>& t) {
    detail::put_raw<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_raw<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(R)));
    detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(R)));
  };
  for (auto& np : params) put_tensor(np.name, np.p->v);
  for (auto& nb : buffers) put_tensor("buffer." + nb.name, *nb.t);
  const std::string s = os.str();
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

// FNV-1a over the serialized bytes; the frozen-model contract compares these.
template <typename R>
std::uint64_t model_checksum(AdrModel<R>& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : serialize_model(model)) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename R>
void load_model_weights(AdrModel<R>& model, const std::vector<std::uint8_t>& bytes) {
  std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw ValidationError("checkpoint: bad magic");
  const auto count = detail::get_raw<std::uint32_t>(is);

  std::map<std::string, Tensor<R>*> slots;
  for (auto& np : model.params()) slots[np.name] = &np.p->v;
  for (auto& nb : model.buffers()) slots["buffer." + nb.name] = nb.t;

  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_raw<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto dtype = detail::get_raw<std::uint8_t>(is);
    const auto ndim = detail::get_raw<std::uint32_t>(is);
    std::vector<int> dims;
    std::size_t total = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      dims.push_back(static_cast<int>(detail::get_raw<std::uint32_t>(is)));
      total *= static_cast<std::size_t>(dims.back());
    }
    auto it = slots.find(name);
    if (it == slots.end())
      throw ValidationError("checkpoint: unexpected tensor " + name);
    if (it->second->shape() != dims)
      throw ValidationError(format_msg("checkpoint: shape mismatch for ", name, ": file ",
                                       "has different dimensions than the model"));
    if (dtype == sizeof(R)) {
      is.read(reinterpret_cast<char*>(it->second->data()),
              static_cast<std::streamsize>(total * sizeof(R)));
    } else if (dtype == 4) {
      std::vector<float> tmp(total);
      is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(total * 4));
      for (std::size_t j = 0; j < total; ++j) (*it->second)[j] = static_cast<R>(tmp[j]);
    } else if (dtype == 8) {
      std::vector<double> tmp(total);
      is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(total * 8));
      for (std::size_t j = 0; j < total; ++j) (*it->second)[j] = static_cast<R>(tmp[j]);
    } else {
      throw ValidationError("checkpoint: unsupported dtype");
    }
    if (!is) throw ValidationError("checkpoint: truncated tensor data for " + name);
    ++filled;
  }
  if (filled != slots.size())
    throw ValidationError(format_msg("checkpoint: file holds ", filled, " tensors, model needs ",
                                     slots.size()));
}

inline std::string channels_to_string(const std::vector<int>& channels) {
  std::string s;
  for (std::size_t i = 0; i < channels.size(); ++i)
    s += (i ? "," : "") + std::to_string(channels[i]);
  return s;
}

inline void write_sidecar(const std::string& path, const CheckpointMeta& meta) {
  std::ofstream f(path);
  if (!f) throw ValidationError("checkpoint: cannot write sidecar " + path);
  f << "format=adr-checkpoint-v1\n";
  f << "stage=" << meta.stage << "\n";
  f << "domain=" << meta.domain << "\n";
  f << "seed=" << meta.seed << "\n";
  f << "git=" << meta.git << "\n";
  f << "precision=" << meta.precision << "\n";
  f << "backbone.blocks=" << meta.backbone.blocks << "\n";
  f << "backbone.channels=" << channels_to_string(meta.backbone.channels) << "\n";
  f << "backbone.input=" << meta.backbone.input_ch << "x" << meta.backbone.input_h << "x"
    << meta.backbone.input_w << "\n";
  f << "backbone.classes=" << meta.backbone.classes << "\n";
  f << "sce.scale=" << meta.sce.scale << "\n";
  f << "sce.topk=" << meta.sce.topk << "\n";
  f << "sce.kernel=" << meta.sce.derived_kernel() << "\n";
  f << "sce.padding=" << meta.sce.derived_padding() << "\n";
  f << "sce.instance_norm=" << (meta.sce.instance_norm ? 1 : 0) << "\n";
}

inline CheckpointMeta read_sidecar(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("checkpoint: cannot open sidecar " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["format"] != "adr-checkpoint-v1")
    throw ValidationError("checkpoint: unknown sidecar format in " + path);
  CheckpointMeta meta;
  meta.stage = std::stoi(kv.at("stage"));
  meta.domain = std::stoi(kv.at("domain"));
  meta.seed = std::stoull(kv.at("seed"));
  meta.git = kv.count("git") ? kv.at("git") : "unknown";
  meta.precision = kv.count("precision") ? kv.at("precision") : "f32";
  meta.backbone.blocks = std::stoi(kv.at("backbone.blocks"));
  meta.backbone.channels.clear();
  {
    std::istringstream cs(kv.at("backbone.channels"));
    std::string tok;
    while (std::getline(cs, tok, ',')) meta.backbone.channels.push_back(std::stoi(tok));
  }
  {
    std::istringstream in(kv.at("backbone.input"));
    char x;
    in >> meta.backbone.input_ch >> x >> meta.backbone.input_h >> x >> meta.backbone.input_w;
  }
  meta.backbone.classes = std::stoi(kv.at("backbone.classes"));
  meta.sce.scale = std::stoi(kv.at("sce.scale"));
  meta.sce.topk = std::stoi(kv.at("sce.topk"));
  meta.sce.kernel = std::stoi(kv.at("sce.kernel"));
  meta.sce.padding = std::stoi(kv.at("sce.padding"));
  meta.sce.instance_norm = kv.at("sce.instance_norm") == "1";
  return meta;
}

template <typename R>
void save_checkpoint(const std::string& path, AdrModel<R>& model, const CheckpointMeta& meta) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("checkpoint: cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  write_sidecar(path + ".meta", meta);
}

template <typename R>
std::pair<AdrModel<R>, CheckpointMeta> load_checkpoint(const std::string& path) {
  CheckpointMeta meta = read_sidecar(path + ".meta");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  AdrModel<R> model;
  model.init(meta.backbone, meta.sce, meta.seed);
  load_model_weights(model, bytes);
  return {std::move(model), std::move(meta)};
}

}  // namespace adr
