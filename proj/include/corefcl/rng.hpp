#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace corefcl {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
///
/// A stream is identified by a 64-bit key and a 64-bit stream id; the
/// n-th block of four 32-bit words is a pure function of (key, stream, n),
/// so any draw can be replayed on any platform. Words are consumed in
/// block order, lowest lane first.
///
/// Derived draws:
///   uniform()  = ((hi << 32 | lo) >> 11) * 2^-53, using two consecutive words
///   below(n)   = floor(uniform() * n)
class Philox {
 public:
  explicit Philox(std::uint64_t key, std::uint64_t stream = 0)
      : key_(key), stream_(stream) {}

  static std::array<std::uint32_t, 4> block(std::uint64_t key, std::uint64_t stream,
                                            std::uint64_t counter);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t stream() const { return stream_; }
  /// Number of 32-bit words consumed so far.
  std::uint64_t position() const { return counter_ == 0 ? 0 : (counter_ - 1) * 4 + lane_; }

 private:
  std::uint64_t key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  unsigned lane_ = 4;
};

/// SplitMix64 finalizer; used to derive independent keys from seeds.
std::uint64_t mix64(std::uint64_t x);

/// Stable 64-bit FNV-1a hash of a string.
std::uint64_t fnv1a64(std::string_view s);

/// seed XOR hash(doc_id, index): per-example seed independent of data order.
std::uint64_t example_seed(std::uint64_t seed, std::string_view doc_id, std::int64_t index);

}  // namespace corefcl
