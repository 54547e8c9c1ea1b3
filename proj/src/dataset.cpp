#include "tpm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>

#include <zlib.h>

#include "tpm/binary_io.hpp"
#include "tpm/error.hpp"
#include "tpm/random.hpp"

namespace tpm {

namespace io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path);
}

std::uint32_t crc32(std::string_view bytes, std::uint32_t running) {
  uLong crc = running;
  const auto* data = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace io

namespace {

constexpr char kMagic[4] = {'T', 'P', 'M', 'D'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::vector<int> Dataset::classes() const {
  std::set<int> labels;
  for (const auto& c : clouds) {
    if (!c.label) throw ParameterError("dataset contains an unlabeled cloud");
    labels.insert(*c.label);
  }
  return {labels.begin(), labels.end()};
}

std::string encode_dataset(const Dataset& dataset) {
  std::string out(kMagic, 4);
  io::put<std::uint32_t>(out, kVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.clouds.size()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.points_per_cloud));
  for (const auto& cloud : dataset.clouds) {
    if (cloud.size() != dataset.points_per_cloud) {
      throw ParameterError("every cloud in a dataset must have points_per_cloud points");
    }
    if (cloud.label && (*cloud.label < 0 || *cloud.label >= kUnlabeled)) {
      throw ParameterError("label does not fit the u16 label field");
    }
    io::put<std::uint16_t>(out, cloud.label ? static_cast<std::uint16_t>(*cloud.label) : kUnlabeled);
    for (const auto& p : cloud.points) {
      io::put<float>(out, static_cast<float>(p.x));
      io::put<float>(out, static_cast<float>(p.y));
      io::put<float>(out, static_cast<float>(p.z));
    }
  }
  return out;
}

Dataset decode_dataset(const std::string& bytes) {
  io::Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw FormatError("bad dataset magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw VersionError("unsupported dataset version " + std::to_string(version), 4);
  }
  const auto count = r.get<std::uint32_t>("record count");
  const auto n = r.get<std::uint32_t>("points per cloud");
  const std::size_t record_bytes = 2 + std::size_t{n} * 12;
  if (r.remaining() != record_bytes * count) {
    throw FormatError("dataset payload size does not match header", r.position());
  }

  Dataset out;
  out.points_per_cloud = n;
  out.clouds.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PointCloud cloud;
    const auto label = r.get<std::uint16_t>("label");
    if (label != kUnlabeled) cloud.label = label;
    cloud.points.resize(n);
    for (auto& p : cloud.points) {
      const std::size_t at = r.position();
      p.x = r.get<float>("coordinate");
      p.y = r.get<float>("coordinate");
      p.z = r.get<float>("coordinate");
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
        throw FormatError("non-finite coordinate", at);
      }
    }
    out.clouds.push_back(std::move(cloud));
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  io::write_file(path.string(), encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path.string()));
}

CorpusSplits generate_corpus(int classes, std::size_t per_class, std::size_t points,
                             std::uint64_t seed) {
  if (classes < 2 || classes > kShapeClassCount) {
    throw ParameterError("corpus class count must be in [2, 8]");
  }
  if (per_class < 1) throw ParameterError("corpus needs at least one cloud per class");
  const std::size_t val_per_class = std::max<std::size_t>(1, per_class / 5);

  CorpusSplits out;
  out.train.points_per_cloud = points;
  out.val.points_per_cloud = points;
  auto fill = [&](Dataset& split, std::uint64_t split_id, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      for (int c = 0; c < classes; ++c) {
        split.clouds.push_back(generate_shape(
            c, points, derive_seed(seed, {split_id, static_cast<std::uint64_t>(c), i})));
      }
    }
  };
  fill(out.train, 0, per_class);
  fill(out.val, 1, val_per_class);
  return out;
}

void write_corpus(const std::filesystem::path& dir, const CorpusSplits& corpus) {
  std::filesystem::create_directories(dir);
  write_dataset(dir / "train.tpmd", corpus.train);
  write_dataset(dir / "val.tpmd", corpus.val);
}

CorpusSplits read_corpus(const std::filesystem::path& dir) {
  return {read_dataset(dir / "train.tpmd"), read_dataset(dir / "val.tpmd")};
}

std::string dataset_fingerprint(const std::filesystem::path& dir) {
  std::uint32_t crc = 0;
  for (const char* name : {"train.tpmd", "val.tpmd"}) {
    crc = io::crc32(io::read_file((dir / name).string()), crc);
  }
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

}  // namespace tpm
