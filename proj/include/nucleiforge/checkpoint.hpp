#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nucleiforge/tensor.hpp"

namespace nf {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Layout: "NFCK", u32 version (1), u64 count, then per tensor: u32 name
// length, UTF-8 name, u32 rank, u64 dims[rank], f64 payload. Little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

/// 64-bit FNV-1a over the encoded checkpoint.
std::uint64_t checkpoint_hash(const NamedTensors& tensors);
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace nf
