#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stdit/tensor.hpp"

namespace stdit {

/// Raised when a checkpoint was written for a different configuration.
class FingerprintError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

/// Named tensor archive.
///
/// File layout, little-endian: "STDF", u32 format version, u64 config
/// fingerprint, u64 record count, then per record u32 name length, UTF-8
/// name, u32 dtype code (0 = f32, 1 = f64), u32 rank, rank u64 extents and
/// the raw payload.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t fingerprint = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, const Tensor& t) { tensors.emplace_back(std::move(name), t); }
  const Tensor* find(std::string_view name) const;
  /// Throws IoError when the record is missing.
  const Tensor& get(std::string_view name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Rejects a mismatched fingerprint after reading only the header.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_fingerprint);
/// Header fingerprint without loading records.
std::uint64_t read_fingerprint(const std::filesystem::path& path);

}  // namespace stdit
