#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace ulfb::ckpt {

constexpr int kFormatVersion = 1;

/// Named arrays plus free-form JSON metadata. Arrays keep insertion order so
/// serialization is deterministic.
struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, torch::Tensor>> arrays;

  void put(const std::string& name, const torch::Tensor& t);
  bool has(const std::string& name) const;
  /// CorruptCheckpoint when missing.
  const torch::Tensor& get(const std::string& name) const;
};

/// Layout: "ULFBCKPT" | u64 header length | header JSON | raw little-endian payload.
/// The header holds the metadata plus reserved keys version, arrays, checksum.
std::string serialize(const Checkpoint& c);
/// IncompatibleCheckpoint on a version mismatch, CorruptCheckpoint otherwise.
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers under `prefix/` + their module path.
void store_module(Checkpoint& c, const std::string& prefix, const torch::nn::Module& m);
/// Copies stored values in place; CorruptCheckpoint on missing names, ShapeError on shape mismatch.
void restore_module(const Checkpoint& c, const std::string& prefix, torch::nn::Module& m);

/// Adam moments and step counts, keyed by parameter position in `opt`.
void store_adam(Checkpoint& c, const std::string& prefix, torch::optim::Adam& opt);
void restore_adam(const Checkpoint& c, const std::string& prefix, torch::optim::Adam& opt);

/// FNV-1a over the bytes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ull);

}  // namespace ulfb::ckpt
