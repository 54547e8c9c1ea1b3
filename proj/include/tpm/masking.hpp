#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace tpm {

/// Ordered mask ratios, strictly decreasing, each in (0, 1). The canonical construction is the
/// triple (m0, 0.5, 1 - m0); ablations also use lists of two or four ratios.
class MaskSpec {
 public:
  MaskSpec() = default;
  /// Throws ParameterError unless 2-4 strictly decreasing ratios in (0, 1) are given.
  explicit MaskSpec(std::vector<double> ratios);

  const std::vector<double>& ratios() const { return ratios_; }
  std::size_t size() const { return ratios_.size(); }
  double operator[](std::size_t i) const { return ratios_[i]; }

  /// "0.6,0.5,0.4"
  std::string to_string() const;

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;

 private:
  std::vector<double> ratios_;
};

MaskSpec derive_mask_triple(double m0);

/// Parses "0.6,0.5,0.4". Throws ParseError on malformed numbers or ordering violations.
MaskSpec parse_mask_construction(std::string_view text);
/// Parses "0.6,0.5,0.4;0.6,0.4".
std::vector<MaskSpec> parse_mask_constructions(std::string_view text);

struct MaskAssignment {
  std::vector<std::size_t> masked;   // ascending
  std::vector<std::size_t> visible;  // ascending
  double ratio = 0.0;

  std::size_t patch_count() const { return masked.size() + visible.size(); }
};

/// round_half_away_from_zero(patch_count * ratio)
std::size_t masked_count(std::size_t patch_count, double ratio);

/// Uniform subset of size masked_count(G, ratio) drawn without replacement. Throws
/// DegenerateError if that count is 0 or G.
MaskAssignment sample_mask(std::size_t patch_count, double ratio, std::uint64_t seed);

}  // namespace tpm
