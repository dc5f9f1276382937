#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgreid/tensor.hpp"

namespace fgreid::inline FGREID_PRECISION {

// Layout, all integers little-endian:
//   "FGRD" | u16 version | u32 tensor count
//   per tensor: u32 name length | name bytes | u8 rank | u32 dims[rank] | f32 payload
inline constexpr char kArchiveMagic[4] = {'F', 'G', 'R', 'D'};
inline constexpr std::uint16_t kArchiveVersion = 1;

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Not an archive (bad magic or malformed header fields).
class FormatError : public ArchiveError {
 public:
  using ArchiveError::ArchiveError;
};

/// Lengths disagree with the bytes present.
class CorruptionError : public ArchiveError {
 public:
  using ArchiveError::ArchiveError;
};

class UnsupportedVersionError : public ArchiveError {
 public:
  using ArchiveError::ArchiveError;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using TensorList = std::vector<NamedTensor>;

std::vector<std::uint8_t> encode_archive(const TensorList& tensors);
TensorList decode_archive(std::span<const std::uint8_t> bytes);

void write_archive(const TensorList& tensors, const std::filesystem::path& path);
TensorList read_archive(const std::filesystem::path& path);

/// Throws std::out_of_range when `name` is missing.
const Tensor& find_tensor(const TensorList& tensors, const std::string& name);

}  // namespace fgreid::inline FGREID_PRECISION
