#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsal/tensor.hpp"

namespace tsal {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline constexpr char kCheckpointMagic[4] = {'T', 'S', 'A', 'L'};
inline constexpr char kFeatureMagic[4] = {'T', 'S', 'F', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;

// Record layout (all little-endian):
//   u32 name length, name bytes, u32 rank, rank x u64 dims, f32 payload.
// Checkpoint: "TSAL", u32 version, u32 count, records.
// Feature file: "TSFT", u32 version, records until end of file.

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

void write_feature_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
/// Raw records of a feature file; throws TruncatedFileError on short reads.
std::vector<NamedTensor> read_feature_records(const std::filesystem::path& path);

}  // namespace tsal
