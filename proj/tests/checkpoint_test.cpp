#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "test_support.hpp"
#include "vitdf/checkpoint.hpp"

using namespace vitdf;
using namespace vitdf::testing;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

CheckpointError::Kind decode_error(std::vector<std::uint8_t> bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode succeeded";
  return CheckpointError::Kind::Io;
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  fs::path dir = scratch_dir("ckpt_idem");
  ViTConfig cfg = tiny_config();
  ModelParameters p = init_parameters(cfg, RandomSource(3));
  save_checkpoint(p, cfg, dir / "a.vitc");
  Checkpoint loaded = load_checkpoint(dir / "a.vitc");
  EXPECT_EQ(loaded.config, cfg);
  save_checkpoint(loaded.params, loaded.config, dir / "b.vitc");
  EXPECT_EQ(slurp(dir / "a.vitc"), slurp(dir / "b.vitc"));
}

TEST(Checkpoint, LayoutHeader) {
  ViTConfig cfg = tiny_config();
  auto bytes = encode_checkpoint(zero_parameters(cfg), cfg);
  ASSERT_GT(bytes.size(), 12u);
  EXPECT_EQ(std::memcmp(bytes.data(), "VITC", 4), 0);
  EXPECT_EQ(read_u32(bytes, 4), 1u);
  const std::uint32_t json_len = read_u32(bytes, 8);
  const std::string json(bytes.begin() + 12, bytes.begin() + 12 + json_len);
  EXPECT_EQ(nlohmann::ordered_json::parse(json).get<ViTConfig>(), cfg);
  std::size_t leaves = 0;
  zero_parameters(cfg).for_each([&](const std::string&, const Tensor&) { ++leaves; });
  EXPECT_EQ(read_u32(bytes, 12 + json_len), leaves);
  std::size_t expected_size = 16 + json_len;
  zero_parameters(cfg).for_each([&](const std::string& name, const Tensor& t) {
    expected_size += 2 + name.size() + 4 + 8 * t.rank() + 4 * t.size();
  });
  EXPECT_EQ(bytes.size(), expected_size);
}

TEST(Checkpoint, RoundTripWithinSinglePrecisionBound) {
  ViTConfig cfg = tiny_config();
  ModelParameters p = random_parameters(cfg, RandomSource(7), 1.0);
  Checkpoint back = decode_checkpoint(encode_checkpoint(p, cfg));
  std::vector<const Tensor*> loaded;
  back.params.for_each([&](const std::string&, const Tensor& t) { loaded.push_back(&t); });
  std::size_t k = 0;
  p.for_each([&](const std::string& name, const Tensor& t) {
    const Tensor& u = *loaded[k++];
    ASSERT_EQ(u.shape(), t.shape()) << name;
    for (std::size_t i = 0; i < t.size(); ++i) {
      // Round-to-nearest error is at most half an ulp of the float result.
      const float f = static_cast<float>(t[i]);
      const double half_ulp = 0.5 * (std::nextafter(std::abs(f), INFINITY) - std::abs(f));
      EXPECT_LE(std::abs(u[i] - t[i]), half_ulp) << name << "[" << i << "]";
    }
  });
}

TEST(Checkpoint, BadMagicIsInvalidCheckpoint) {
  fs::path dir = scratch_dir("ckpt_magic");
  ViTConfig cfg = tiny_config();
  auto bytes = encode_checkpoint(zero_parameters(cfg), cfg);
  bytes[0] = 'X';
  {
    std::ofstream out(dir / "bad.vitc", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  try {
    load_checkpoint(dir / "bad.vitc");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::InvalidMagic);
    EXPECT_NE(std::string(e.what()).find("invalid checkpoint"), std::string::npos);
  }
}

TEST(Checkpoint, DistinctErrorKinds) {
  ViTConfig cfg = tiny_config();
  const auto good = encode_checkpoint(zero_parameters(cfg), cfg);

  auto version = good;
  version[4] = 2;
  EXPECT_EQ(decode_error(version), CheckpointError::Kind::VersionMismatch);

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    EXPECT_EQ(decode_error({good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)}),
              CheckpointError::Kind::Truncated)
        << cut;
  }

  // Same tensors but the embedded config claims a wider MLP.
  ViTConfig wider = cfg;
  wider.mlp_dim = 64;
  auto mismatched = encode_checkpoint(zero_parameters(cfg), cfg);
  const std::uint32_t json_len = read_u32(good, 8);
  std::string json(good.begin() + 12, good.begin() + 12 + json_len);
  const std::string wide_json = nlohmann::ordered_json(wider).dump();
  if (wide_json.size() == json.size()) {
    std::copy(wide_json.begin(), wide_json.end(), mismatched.begin() + 12);
    EXPECT_EQ(decode_error(mismatched), CheckpointError::Kind::ShapeMismatch);
  } else {
    ADD_FAILURE() << "config JSON lengths differ; adjust the probe";
  }

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), CheckpointError::Kind::Corrupt);

  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.vitc"), CheckpointError);
}

TEST(Checkpoint, QuantizeIsIdempotent) {
  ViTConfig cfg = tiny_config();
  ModelParameters q = quantize_f32(random_parameters(cfg, RandomSource(1), 1.0));
  EXPECT_EQ(encode_checkpoint(q, cfg), encode_checkpoint(quantize_f32(q), cfg));
  EXPECT_EQ(encode_checkpoint(q, cfg), encode_checkpoint(decode_checkpoint(encode_checkpoint(q, cfg)).params, cfg));
}
