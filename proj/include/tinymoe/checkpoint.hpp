#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tinymoe/model.hpp"

namespace tinymoe {

// Named-tensor container:
//   8 bytes  little-endian manifest length
//   manifest JSON {format, config, moe, step, tensors: [{name, shape, group}]}
//   blob of little-endian float32 values in manifest order
struct Checkpoint {
  Model<float> model;
  std::int64_t step = 0;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) {
    v = (v << 8) | p[i];
  }
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model<float>& model, std::int64_t step = 0) {
  nlohmann::json manifest;
  manifest["format"] = "tinymoe-ckpt-v1";
  manifest["config"] = model.config();
  manifest["moe"] = {{"n_experts", model.moe_shape().n_experts}, {"top_k", model.moe_shape().top_k}};
  manifest["step"] = step;
  auto& tensors = manifest["tensors"] = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& p : model.params()) {
    tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"group", std::string(group_name(p.group))}});
    total += p.numel();
  }
  const std::string head = manifest.dump();
  std::string out;
  out.reserve(8 + head.size() + 4 * total);
  detail::put_u64_le(out, head.size());
  out += head;
  for (const auto& p : model.params()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      detail::put_f32_le(out, p.value.data()[i]);
    }
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  check(bytes.size() >= 8, ErrorCode::CheckpointError, "truncated checkpoint header");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto head_len = detail::get_u64_le(raw);
  check(bytes.size() >= 8 + head_len, ErrorCode::CheckpointError, "truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(8, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CheckpointError, std::string("bad manifest: ") + e.what());
  }
  check(manifest.value("format", "") == "tinymoe-ckpt-v1", ErrorCode::CheckpointError, "unknown checkpoint format");
  const auto cfg = manifest.at("config").get<ModelConfig>();
  const MoeShape moe{manifest.at("moe").at("n_experts").get<int>(), manifest.at("moe").at("top_k").get<int>()};
  Checkpoint ck{Model<float>(cfg, moe, false), manifest.value("step", std::int64_t{0})};
  auto& store = ck.model.params();
  const auto& tensors = manifest.at("tensors");
  check(tensors.size() == store.size(), ErrorCode::CheckpointError, "tensor count does not match model layout");
  std::size_t offset = 8 + head_len;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& p = store[i];
    const auto& t = tensors[i];
    check(t.at("name").get<std::string>() == p.name, ErrorCode::CheckpointError,
          "tensor order mismatch at " + p.name);
    check(t.at("shape").get<std::vector<std::size_t>>() == p.shape, ErrorCode::CheckpointError,
          "shape mismatch for " + p.name);
    check(parse_group(t.at("group").get<std::string>()) == p.group, ErrorCode::CheckpointError,
          "group mismatch for " + p.name);
    const std::size_t n = p.numel();
    check(bytes.size() >= offset + 4 * n, ErrorCode::CheckpointError, "truncated tensor blob");
    for (std::size_t j = 0; j < n; ++j) {
      p.value.data()[j] = detail::get_f32_le(raw + offset + 4 * j);
    }
    offset += 4 * n;
  }
  check(offset == bytes.size(), ErrorCode::CheckpointError, "trailing bytes after tensor blob");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, std::int64_t step = 0) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), ErrorCode::CheckpointError, "cannot write " + path.string());
  const auto bytes = serialize_checkpoint(model, step);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  check(f.good(), ErrorCode::CheckpointError, "write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorCode::CheckpointError, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// FNV-1a over the serialized parameters; stable identity for a checkpoint.
inline std::uint64_t model_hash(const Model<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_checkpoint(model, 0)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tinymoe
