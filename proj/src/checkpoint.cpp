#include "tpm/checkpoint.hpp"

#include <json.hpp>

#include "tpm/binary_io.hpp"
#include "tpm/error.hpp"

namespace tpm {

namespace {

constexpr char kMagic[4] = {'T', 'P', 'M', 'C'};
const std::string kParamPrefix = "param/";
const std::string kFirstPrefix = "adam.m/";
const std::string kSecondPrefix = "adam.v/";

void put_tensor(std::string& out, std::string& payloads, const std::string& name,
                const Tensor<float>& t) {
  if (name.size() > 0xFFFF) throw ParameterError("tensor name too long: " + name);
  if (t.rank() > 0xFF) throw ParameterError("tensor rank too large: " + name);
  io::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  io::put<std::uint8_t>(out, 0);
  io::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw ParameterError("tensor dimension too large: " + name);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  const std::string_view bytes(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
  out.append(bytes);
  payloads.append(bytes);
}

}  // namespace

std::string encode_checkpoint(const CheckpointRecord& record) {
  nlohmann::ordered_json header;
  header["epoch"] = record.epoch;
  header["manifest"] = record.manifest;
  header["masks"] = record.masks;
  header["mask_losses"] = record.mask_losses;
  header["loss_total"] = record.loss_total;
  header["optimizer_steps"] =
      record.optimizer ? nlohmann::json(record.optimizer->steps) : nlohmann::json(nullptr);
  const std::string header_text = header.dump();

  std::string out(kMagic, 4);
  io::put<std::uint32_t>(out, kCheckpointVersion);
  io::put<std::uint64_t>(out, header_text.size());
  out += header_text;

  std::size_t count = record.params.size();
  if (record.optimizer) count += record.optimizer->first_moment.size() * 2;
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(count));
  std::string payloads;
  for (const auto& e : record.params.entries()) put_tensor(out, payloads, kParamPrefix + e.name, e.value);
  if (record.optimizer) {
    if (record.optimizer->first_moment.size() != record.optimizer->second_moment.size()) {
      throw ParameterError("optimizer moments differ in size");
    }
    for (const auto& e : record.optimizer->first_moment.entries()) {
      put_tensor(out, payloads, kFirstPrefix + e.name, e.value);
    }
    for (const auto& e : record.optimizer->second_moment.entries()) {
      put_tensor(out, payloads, kSecondPrefix + e.name, e.value);
    }
  }
  io::put<std::uint32_t>(out, io::crc32(payloads));
  return out;
}

CheckpointRecord decode_checkpoint(const std::string& bytes) {
  io::Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (magic != std::string_view(kMagic, 4)) throw FormatError("not a TPMC checkpoint", 0);
  const std::size_t version_at = r.position();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version) +
                           " (reader supports " + std::to_string(kCheckpointVersion) + ")",
                       version_at);
  }
  const auto header_len = r.get<std::uint64_t>("header length");
  const std::size_t header_at = r.position();
  const auto header_text = r.take(header_len, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), header_at);
  }

  CheckpointRecord rec;
  try {
    rec.epoch = header.at("epoch").get<std::size_t>();
    rec.manifest = header.at("manifest").get<std::string>();
    rec.masks = header.at("masks").get<std::string>();
    rec.mask_losses = header.at("mask_losses").get<std::vector<double>>();
    rec.loss_total = header.at("loss_total").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is incomplete: ") + e.what(), header_at);
  }

  const auto count = r.get<std::uint32_t>("tensor count");
  std::string payloads;
  OptimizerState opt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.position();
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    const std::string name(r.take(name_len, "tensor name"));
    const auto dtype = r.get<std::uint8_t>("tensor dtype");
    if (dtype != 0) throw FormatError("unsupported tensor dtype " + std::to_string(dtype), at);
    const auto rank = r.get<std::uint8_t>("tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("tensor dims");
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / sizeof(float)) throw FormatError("truncated tensor payload", r.position());
    const auto payload = r.take(n * sizeof(float), "tensor payload");
    payloads.append(payload);
    Tensor<float> t(shape);
    std::memcpy(t.data(), payload.data(), payload.size());

    auto strip = [&](const std::string& prefix) -> std::optional<std::string> {
      if (name.rfind(prefix, 0) == 0) return name.substr(prefix.size());
      return std::nullopt;
    };
    try {
      if (auto p = strip(kParamPrefix)) rec.params.add(*p, std::move(t));
      else if (auto m = strip(kFirstPrefix)) opt.first_moment.add(*m, std::move(t));
      else if (auto v = strip(kSecondPrefix)) opt.second_moment.add(*v, std::move(t));
      else throw FormatError("unknown tensor group in '" + name + "'", at);
    } catch (const ParameterError& e) {
      throw FormatError(e.what(), at);
    }
  }
  const std::size_t crc_at = r.position();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (stored != io::crc32(payloads)) throw FormatError("checkpoint checksum mismatch", crc_at);
  if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.position());

  if (header.contains("optimizer_steps") && !header["optimizer_steps"].is_null()) {
    opt.steps = header["optimizer_steps"].get<std::size_t>();
    rec.optimizer = std::move(opt);
  }
  return rec;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointRecord& record) {
  io::write_file(path.string(), encode_checkpoint(record));
}

CheckpointRecord load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path.string()));
}

void check_compatible(const ModelParams<float>& params, const ModelConfig& config,
                      bool encoder_only) {
  const auto expected = init_params(config, 0);
  std::size_t matched = 0;
  for (const auto& e : expected.entries()) {
    if (encoder_only && !is_encoder_param(e.name)) continue;
    if (!params.contains(e.name)) {
      throw CompatibilityError("checkpoint lacks tensor '" + e.name + "' required by the config");
    }
    const auto& have = params.at(e.name).shape();
    if (have != e.value.shape()) {
      throw CompatibilityError("tensor '" + e.name + "' has shape " + shape_string(have) +
                               " but the config needs " + shape_string(e.value.shape()));
    }
    ++matched;
  }
  if (!encoder_only && matched != params.size()) {
    throw CompatibilityError("checkpoint holds tensors the config does not define");
  }
}

}  // namespace tpm
