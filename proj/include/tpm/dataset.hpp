#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tpm/geometry.hpp"

namespace tpm {

/// Label value stored for clouds without a class.
inline constexpr std::uint16_t kUnlabeled = 0xFFFF;

/// One split of a TPMD dataset file:
///   "TPMD" | version u32 = 1 | record count u32 | points per cloud u32 |
///   per record: label u16, then n*3 binary32 coordinates, row-major. Little-endian throughout.
struct Dataset {
  std::vector<PointCloud> clouds;
  std::size_t points_per_cloud = 0;

  std::size_t size() const { return clouds.size(); }
  /// Distinct labels in ascending order; throws ParameterError on an unlabeled cloud.
  std::vector<int> classes() const;
};

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

/// Bytes of a dataset exactly as write_dataset emits them.
std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(const std::string& bytes);

struct CorpusSplits {
  Dataset train;
  Dataset val;
};

/// Procedural corpus: `per_class` training clouds and max(1, per_class / 5) validation clouds for
/// each of the first `classes` shape classes.
CorpusSplits generate_corpus(int classes, std::size_t per_class, std::size_t points,
                             std::uint64_t seed);

/// Writes train.tpmd and val.tpmd into `dir`.
void write_corpus(const std::filesystem::path& dir, const CorpusSplits& corpus);
CorpusSplits read_corpus(const std::filesystem::path& dir);

/// CRC32 (hex) over the raw bytes of the split files in `dir`, in train/val order.
std::string dataset_fingerprint(const std::filesystem::path& dir);

}  // namespace tpm
