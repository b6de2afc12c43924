#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "orefsdet/autograd.hpp"
#include "orefsdet/config.hpp"

namespace orefsdet {

inline constexpr char kCheckpointMagic[8] = {'O', 'F', 'S', 'D', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

/// Layout: 8-byte magic, u64 LE manifest length, manifest JSON, then every
/// parameter as little-endian float32 in manifest order.
struct CheckpointMeta {
  Config config;
  std::uint64_t iteration = 0;
  std::string phase;  // "base" or "finetune"
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ParameterList<T>& params, const CheckpointMeta& meta) {
  nlohmann::json m;
  m["format_version"] = kCheckpointVersion;
  m["config"] = meta.config;
  m["iteration"] = meta.iteration;
  m["phase"] = meta.phase;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    entries.push_back({{"name", p.name}, {"shape", p.var.shape()}, {"offset", offset}});
    offset += p.var.numel() * 4;
  }
  m["parameters"] = entries;
  m["blob_bytes"] = offset;
  const std::string manifest = m.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, manifest.size());
  out += manifest;
  out.reserve(out.size() + offset);
  for (const auto& p : params)
    for (T v : p.var.value().values()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterList<T>& params, const CheckpointMeta& meta) {
  const std::string bytes = serialize_checkpoint(params, meta);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write: " + path.string());
}

struct CheckpointFile {
  nlohmann::json manifest;
  std::vector<unsigned char> blob;
};

inline CheckpointFile parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(p, kCheckpointMagic, 8) != 0) throw DataError(what + ": not a checkpoint file");
  const std::uint64_t mlen = detail::get_u64(p + 8);
  if (bytes.size() < 16 + mlen) throw DataError(what + ": truncated manifest");
  CheckpointFile cf;
  try {
    cf.manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(16 + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": bad manifest: " + e.what());
  }
  const int version = cf.manifest.value("format_version", -1);
  if (version != kCheckpointVersion)
    throw DataError(what + ": format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  cf.blob.assign(p + 16 + mlen, p + bytes.size());
  if (cf.blob.size() != cf.manifest.value("blob_bytes", std::uint64_t{0}))
    throw DataError(what + ": blob size does not match manifest");
  return cf;
}

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

inline CheckpointMeta checkpoint_meta(const CheckpointFile& cf) {
  CheckpointMeta m;
  m.config = cf.manifest.at("config").get<Config>();
  m.iteration = cf.manifest.value("iteration", std::uint64_t{0});
  m.phase = cf.manifest.value("phase", std::string());
  return m;
}

/// Copies stored values into `params`. Every parameter must be present with
/// an identical shape; the first offender is named.
template <typename T>
void load_parameters(const CheckpointFile& cf, ParameterList<T>& params) {
  std::unordered_map<std::string, const nlohmann::json*> by_name;
  for (const auto& e : cf.manifest.at("parameters")) by_name[e.at("name").get<std::string>()] = &e;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint lacks parameter " + p.name);
    const Shape stored = it->second->at("shape").template get<Shape>();
    if (stored != p.var.shape())
      throw DataError("shape mismatch for " + p.name + ": checkpoint " + shape_str(stored) + ", model " +
                      shape_str(p.var.shape()));
  }
  for (auto& p : params) {
    const auto& e = *by_name[p.name];
    const std::uint64_t off = e.at("offset").template get<std::uint64_t>();
    if (off + p.var.numel() * 4 > cf.blob.size()) throw DataError("checkpoint blob too short for " + p.name);
    Tensor<T>& v = p.var.mutable_value();
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = static_cast<T>(detail::get_f32(cf.blob.data() + off + 4 * i));
  }
}

}  // namespace orefsdet
