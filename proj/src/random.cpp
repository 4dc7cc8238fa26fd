#include "vitdf/random.hpp"

#include <cmath>
#include <numbers>

namespace vitdf {

namespace {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t RandomSource::mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RandomSource RandomSource::substream(std::string_view label) const {
  return RandomSource(seed_, mix(key_ ^ mix(fnv1a(label))));
}

RandomSource RandomSource::substream(std::uint64_t index) const {
  return RandomSource(seed_, mix(key_ + mix(index + kGamma)));
}

std::uint64_t RandomSource::next_u64() {
  ++counter_;
  return mix(key_ + counter_ * kGamma);
}

double RandomSource::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::size_t RandomSource::index(std::size_t n) {
  // Lemire's multiply-shift; bias is < n / 2^64 which is negligible here.
  auto wide = static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
  return static_cast<std::size_t>(wide >> 64);
}

double RandomSource::normal() {
  // Box-Muller, one output per pair of draws.
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RandomSource::truncated_normal(double stddev, double bound) {
  for (;;) {
    double z = normal();
    if (std::abs(z) <= bound) return z * stddev;
  }
}

}  // namespace vitdf
