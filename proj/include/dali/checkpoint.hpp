#pragma once

#include "dali/nn.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace dali {

// Single-file checkpoint container: magic, a JSON manifest (shape table,
// resolved config, counters, rng states), then one contiguous float64 blob.
// Per parameter the blob holds value, adam_m, adam_v back to back, in
// registry creation order. Layout details in docs/formats.md.
namespace ckpt {

inline constexpr char kMagic[8] = {'D', 'A', 'L', 'I', 'C', 'K', 'P', '1'};

inline void save(const std::string& path, ParamRegistry& reg,
                 const std::map<std::string, std::string>& meta) {
  nlohmann::json manifest;
  for (const auto& [k, v] : meta) manifest["meta"][k] = v;
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;  // in doubles
  auto ps = reg.all();
  for (const Parameter* p : ps) {
    nlohmann::json jp;
    jp["name"] = p->name;
    jp["rows"] = p->value.rows();
    jp["cols"] = p->value.cols();
    jp["offset"] = offset;
    params.push_back(jp);
    offset += 3 * static_cast<std::size_t>(p->value.size());
  }
  manifest["params"] = params;
  manifest["total_doubles"] = offset;
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t mlen = mtext.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const Parameter* p : ps) {
    auto dump = [&](const Mat& m) {
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(sizeof(double) * m.size()));
    };
    dump(p->value);
    dump(p->adam_m);
    dump(p->adam_v);
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

struct Loaded {
  nlohmann::json manifest;
  std::vector<double> blob;

  std::string meta(const std::string& key) const {
    if (!manifest.contains("meta") || !manifest["meta"].contains(key))
      throw std::runtime_error("checkpoint missing meta key: " + key);
    return manifest["meta"][key].get<std::string>();
  }
  bool has_meta(const std::string& key) const {
    return manifest.contains("meta") && manifest["meta"].contains(key);
  }
};

inline Loaded load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  Loaded l;
  l.manifest = nlohmann::json::parse(mtext);
  const std::size_t total = l.manifest.at("total_doubles").get<std::size_t>();
  l.blob.resize(total);
  in.read(reinterpret_cast<char*>(l.blob.data()),
          static_cast<std::streamsize>(sizeof(double) * total));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return l;
}

// Restores parameter values and optimizer moments; the registry must contain
// exactly the same named shapes.
inline void apply(const Loaded& l, ParamRegistry& reg) {
  const auto& params = l.manifest.at("params");
  if (params.size() != reg.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (const auto& jp : params) {
    const std::string name = jp.at("name").get<std::string>();
    Parameter& p = reg.get(name);
    const int rows = jp.at("rows").get<int>();
    const int cols = jp.at("cols").get<int>();
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    std::size_t off = jp.at("offset").get<std::size_t>();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    auto read_into = [&](Mat& m) {
      std::memcpy(m.data(), l.blob.data() + off, sizeof(double) * n);
      off += n;
    };
    read_into(p.value);
    read_into(p.adam_m);
    read_into(p.adam_v);
  }
}

}  // namespace ckpt
}  // namespace dali
