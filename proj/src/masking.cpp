#include "tpm/masking.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tpm/error.hpp"
#include "tpm/random.hpp"

namespace tpm {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace

MaskSpec::MaskSpec(std::vector<double> ratios) : ratios_(std::move(ratios)) {
  if (ratios_.size() < 2 || ratios_.size() > 4) {
    throw ParameterError("a mask construction needs 2 to 4 ratios");
  }
  for (std::size_t i = 0; i < ratios_.size(); ++i) {
    if (!(ratios_[i] > 0.0 && ratios_[i] < 1.0)) {
      throw ParameterError("mask ratios must lie in the open interval (0, 1)");
    }
    if (i > 0 && !(ratios_[i] < ratios_[i - 1])) {
      throw ParameterError("mask ratios must be strictly decreasing");
    }
  }
}

std::string MaskSpec::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < ratios_.size(); ++i) {
    if (i) os << ',';
    os << ratios_[i];
  }
  return os.str();
}

MaskSpec derive_mask_triple(double m0) {
  if (!(m0 > 0.5 && m0 < 1.0)) {
    throw ParameterError("base mask ratio must satisfy 0.5 < m0 < 1 for a triple construction");
  }
  return MaskSpec({m0, 0.5, 1.0 - m0});
}

MaskSpec parse_mask_construction(std::string_view text) {
  std::vector<double> ratios;
  std::string_view rest = text;
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view token = trim(rest.substr(0, comma));
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
    if (token.empty() || ec != std::errc() || ptr != token.data() + token.size()) {
      throw ParseError("malformed mask ratio '" + std::string(token) + "' in '" +
                       std::string(text) + "'");
    }
    ratios.push_back(value);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  try {
    return MaskSpec(std::move(ratios));
  } catch (const ParameterError& e) {
    throw ParseError("invalid mask construction '" + std::string(text) + "': " + e.what());
  }
}

std::vector<MaskSpec> parse_mask_constructions(std::string_view text) {
  std::vector<MaskSpec> out;
  std::string_view rest = text;
  while (true) {
    const auto semi = rest.find(';');
    out.push_back(parse_mask_construction(trim(rest.substr(0, semi))));
    if (semi == std::string_view::npos) break;
    rest.remove_prefix(semi + 1);
  }
  return out;
}

std::size_t masked_count(std::size_t patch_count, double ratio) {
  // std::round rounds halfway cases away from zero.
  return static_cast<std::size_t>(std::round(static_cast<double>(patch_count) * ratio));
}

MaskAssignment sample_mask(std::size_t patch_count, double ratio, std::uint64_t seed) {
  if (patch_count < 1) throw ParameterError("mask sampling needs at least one patch");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("mask ratio must lie in (0, 1)");
  const std::size_t m = masked_count(patch_count, ratio);
  if (m == 0 || m == patch_count) {
    throw DegenerateError("mask ratio " + std::to_string(ratio) + " on " +
                          std::to_string(patch_count) + " patches masks " + std::to_string(m));
  }

  std::vector<std::size_t> perm(patch_count);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {0x3a5cULL}));
  // Partial Fisher-Yates: the first m slots become a uniform m-subset.
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(patch_count - i));
    std::swap(perm[i], perm[j]);
  }

  MaskAssignment out;
  out.ratio = ratio;
  out.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  out.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  std::sort(out.masked.begin(), out.masked.end());
  std::sort(out.visible.begin(), out.visible.end());
  return out;
}

}  // namespace tpm
