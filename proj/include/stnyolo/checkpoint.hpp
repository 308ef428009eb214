#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// Named float64 array as stored in a checkpoint.
struct StoredArray {
  std::string name;
  Shape shape;
  std::vector<Real> values;

  bool operator==(const StoredArray&) const = default;
};

/// Container layout:
///   8 bytes  magic "STNYCKPT"
///   8 bytes  header length L (uint64, little-endian)
///   L bytes  JSON header: {"format_version", "dtype", "byte_order", "meta",
///            "tensors": [{"name", "shape", "offset", "nbytes"}]}
///   payload  raw little-endian float64 values; offsets are relative to the
///            first payload byte.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredArray> arrays;

  const StoredArray* find(const std::string& name) const;
};

inline constexpr int kCheckpointFormatVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// In-memory encode/decode of the same container.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace stnyolo
