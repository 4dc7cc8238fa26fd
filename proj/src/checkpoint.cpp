#include "vitdf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace vitdf {

namespace {

using Kind = CheckpointError::Kind;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    auto u = static_cast<std::uint64_t>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_bytes(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float get_f32(const char* what) { return std::bit_cast<float>(get<std::uint32_t>(what)); }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(Kind::Truncated, std::string("invalid checkpoint: truncated while reading ") + what);
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParameters& params, const ViTConfig& config) {
  check_parameters(config, params);
  Writer w;
  w.put_bytes("VITC");
  w.put<std::uint32_t>(kCheckpointVersion);
  nlohmann::ordered_json cj = config;
  const std::string config_text = cj.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config_text.size()));
  w.put_bytes(config_text);
  std::uint32_t count = 0;
  params.for_each([&count](const std::string&, const Tensor&) { ++count; });
  w.put<std::uint32_t>(count);
  params.for_each([&w](const std::string& name, const Tensor& t) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    for (double v : t.data()) w.put_f32(static_cast<float>(v));
  });
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  // A short file that starts like a checkpoint is truncated, not foreign.
  if (!bytes.empty() && std::memcmp(bytes.data(), "VITC", std::min<std::size_t>(bytes.size(), 4)) != 0) {
    throw CheckpointError(Kind::InvalidMagic, "invalid checkpoint: bad magic bytes");
  }
  (void)r.get_string(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::VersionMismatch, "unsupported checkpoint version " + std::to_string(version) +
                                                     " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto config_len = r.get<std::uint32_t>("config length");
  const std::string config_text = r.get_string(config_len, "config");
  Checkpoint ck;
  try {
    ck.config = nlohmann::ordered_json::parse(config_text).get<ViTConfig>();
    ck.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Corrupt, std::string("invalid checkpoint: unreadable config: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::Corrupt, std::string("invalid checkpoint: ") + e.what());
  }

  ck.params = zero_parameters(ck.config);
  std::map<std::string, Tensor*> slots;
  ck.params.for_each([&slots](const std::string& name, Tensor& t) { slots.emplace(name, &t); });

  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != slots.size()) {
    throw CheckpointError(Kind::ShapeMismatch, "checkpoint holds " + std::to_string(count) +
                                                   " tensors, config expects " + std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    const std::string name = r.get_string(name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw CheckpointError(Kind::Corrupt, "invalid checkpoint: implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("tensor dims")));
    auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError(Kind::ShapeMismatch, "checkpoint tensor '" + name + "' is not part of the config");
    Tensor& slot = *it->second;
    if (slot.shape() != shape) {
      throw CheckpointError(Kind::ShapeMismatch, "checkpoint tensor '" + name + "' has shape " + to_string(shape) +
                                                     ", config expects " + slot.shape_string());
    }
    for (auto& v : slot.data()) v = static_cast<double>(r.get_f32("tensor data"));
    slots.erase(it);
  }
  if (r.remaining() != 0) throw CheckpointError(Kind::Corrupt, "invalid checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const ModelParameters& params, const ViTConfig& config, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(Kind::Io, "cannot write checkpoint '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(Kind::Io, "failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::Io, "cannot read checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

ModelParameters quantize_f32(const ModelParameters& params) {
  ModelParameters out = params;
  out.for_each([](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  });
  return out;
}

}  // namespace vitdf
