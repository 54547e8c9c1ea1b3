#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tpm/model.hpp"

namespace tpm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
  NamedTensors<float> first_moment;
  NamedTensors<float> second_moment;
  std::size_t steps = 0;
};

/// Snapshot of the shared parameters after one pre-training epoch.
///
/// File layout: "TPMC" | version u32 | header length u64 | header JSON | tensor count u32 |
/// per tensor {name length u16, name, dtype u8 (0 = binary32), rank u8, dims u32 x rank,
/// payload} | CRC32 u32 over the concatenated tensor payloads. Little-endian throughout.
struct CheckpointRecord {
  std::size_t epoch = 0;
  std::string manifest;   // path of the run manifest this checkpoint belongs to
  std::string masks;      // e.g. "0.6,0.5,0.4"
  std::vector<double> mask_losses;
  double loss_total = 0.0;
  ModelParams<float> params;
  std::optional<OptimizerState> optimizer;
};

std::string encode_checkpoint(const CheckpointRecord& record);
/// Throws FormatError (with byte offset) on bad magic, truncation or checksum mismatch and
/// VersionError on an unsupported version.
CheckpointRecord decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const CheckpointRecord& record);
CheckpointRecord load_checkpoint(const std::filesystem::path& path);

/// Throws CompatibilityError unless `params` holds exactly the tensors init_params(config)
/// would create (same names and shapes). With encoder_only, decoder tensors are ignored.
void check_compatible(const ModelParams<float>& params, const ModelConfig& config,
                      bool encoder_only = false);

}  // namespace tpm
