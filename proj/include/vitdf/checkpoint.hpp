#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vitdf/error.hpp"
#include "vitdf/vit.hpp"

namespace vitdf {

// Binary layout, little-endian:
//   "VITC" | u32 version (=1) | u32 config length | config JSON (UTF-8)
//   | u32 tensor count | per tensor: u16 name length, name, u32 rank,
//   u64 dims[rank], f32 data[prod(dims)]

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { InvalidMagic, VersionMismatch, Truncated, ShapeMismatch, Corrupt, Io };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ViTConfig config;
  ModelParameters params;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelParameters& params, const ViTConfig& config);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelParameters& params, const ViTConfig& config, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rounds every parameter through single precision, as a save/load would.
ModelParameters quantize_f32(const ModelParameters& params);

}  // namespace vitdf
