#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <compare>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "iaxkad/params.hpp"
#include "iaxkad/sha1.hpp"

namespace iaxkad {

namespace detail {

/// Big-endian unsigned integer of a configurable bit width (8..256).
/// Only the first byte_size() bytes of `b` are significant; when the width
/// is not a byte multiple the unused high bits of b[0] are kept zero.
struct WideUint {
  std::uint16_t bits = 0;
  std::array<std::uint8_t, 32> b{};

  int byte_size() const { return (bits + 7) / 8; }

  void mask_top() {
    int extra = byte_size() * 8 - bits;
    if (extra > 0) b[0] &= static_cast<std::uint8_t>(0xFF >> extra);
  }

  std::strong_ordering compare(const WideUint& o) const {
    for (int i = 0; i < byte_size(); ++i) {
      if (b[i] != o.b[i]) return b[i] <=> o.b[i];
    }
    return std::strong_ordering::equal;
  }

  bool is_zero() const {
    for (int i = 0; i < byte_size(); ++i)
      if (b[i] != 0) return false;
    return true;
  }

  /// Position of the most significant set bit, counted from the LSB.
  /// Returns -1 for zero.
  int msb() const {
    int n = byte_size();
    for (int i = 0; i < n; ++i) {
      if (b[i] == 0) continue;
      int p = 7;
      while (!(b[i] & (1 << p))) --p;
      return (n - 1 - i) * 8 + p;
    }
    return -1;
  }

  /// Bit at position `pos` counted from the MSB of the B-bit value.
  bool bit_from_msb(int pos) const {
    int lsb_pos = bits - 1 - pos;
    int n = byte_size();
    int byte = n - 1 - lsb_pos / 8;
    return (b[byte] >> (lsb_pos % 8)) & 1;
  }

  void set_bit_from_msb(int pos, bool v) {
    int lsb_pos = bits - 1 - pos;
    int n = byte_size();
    int byte = n - 1 - lsb_pos / 8;
    std::uint8_t mask = static_cast<std::uint8_t>(1 << (lsb_pos % 8));
    if (v)
      b[byte] |= mask;
    else
      b[byte] &= static_cast<std::uint8_t>(~mask);
  }

  std::string to_hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    int nibbles = (bits + 3) / 4;
    std::string out(static_cast<std::size_t>(nibbles), '0');
    // Walk nibbles from the least significant end.
    int n = byte_size();
    for (int i = 0; i < nibbles; ++i) {
      int byte = n - 1 - i / 2;
      std::uint8_t nib = (i % 2 == 0) ? (b[byte] & 0x0F) : (b[byte] >> 4);
      out[static_cast<std::size_t>(nibbles - 1 - i)] = digits[nib];
    }
    return out;
  }
};

inline WideUint wide_from_bytes(std::span<const std::uint8_t> bytes, int bits) {
  WideUint v;
  v.bits = static_cast<std::uint16_t>(bits);
  int n = v.byte_size();
  if (static_cast<int>(bytes.size()) < n)
    throw std::invalid_argument("not enough bytes for key width");
  std::copy_n(bytes.begin(), n, v.b.begin());
  v.mask_top();
  return v;
}

inline WideUint wide_from_u64(std::uint64_t value, int bits) {
  WideUint v;
  v.bits = static_cast<std::uint16_t>(bits);
  int n = v.byte_size();
  for (int i = 0; i < 8 && i < n; ++i)
    v.b[n - 1 - i] = static_cast<std::uint8_t>(value >> (8 * i));
  v.mask_top();
  return v;
}

inline WideUint wide_from_hex(std::string_view hex, int bits) {
  WideUint v;
  v.bits = static_cast<std::uint16_t>(bits);
  int n = v.byte_size();
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::invalid_argument("bad hex digit");
  };
  int i = 0;
  for (auto it = hex.rbegin(); it != hex.rend(); ++it, ++i) {
    int byte = n - 1 - i / 2;
    if (byte < 0) throw std::invalid_argument("hex string too long");
    std::uint8_t d = static_cast<std::uint8_t>(nib(*it));
    v.b[byte] |= (i % 2 == 0) ? d : static_cast<std::uint8_t>(d << 4);
  }
  v.mask_top();
  return v;
}

}  // namespace detail

/// B-bit node/key identifier in the overlay key space.
class PeerId {
 public:
  PeerId() = default;

  static PeerId zero(int bits) { return PeerId(detail::wide_from_u64(0, bits)); }

  static PeerId from_bytes(std::span<const std::uint8_t> bytes, int bits) {
    return PeerId(detail::wide_from_bytes(bytes, bits));
  }

  static PeerId from_u64(std::uint64_t value, int bits) {
    return PeerId(detail::wide_from_u64(value, bits));
  }

  static PeerId from_hex(std::string_view hex, int bits) {
    return PeerId(detail::wide_from_hex(hex, bits));
  }

  template <class Rng>
  static PeerId random(Rng& rng, int bits) {
    detail::WideUint v;
    v.bits = static_cast<std::uint16_t>(bits);
    std::uniform_int_distribution<int> byte_dist(0, 255);
    for (int i = 0; i < v.byte_size(); ++i)
      v.b[i] = static_cast<std::uint8_t>(byte_dist(rng));
    v.mask_top();
    return PeerId(v);
  }

  int bits() const { return value_.bits; }
  int byte_size() const { return value_.byte_size(); }
  std::span<const std::uint8_t> bytes() const {
    return {value_.b.data(), static_cast<std::size_t>(value_.byte_size())};
  }
  bool bit_from_msb(int pos) const { return value_.bit_from_msb(pos); }
  std::string to_hex() const { return value_.to_hex(); }

  friend bool operator==(const PeerId& a, const PeerId& b) {
    return a.value_.bits == b.value_.bits &&
           a.value_.compare(b.value_) == std::strong_ordering::equal;
  }
  friend std::strong_ordering operator<=>(const PeerId& a, const PeerId& b) {
    if (a.value_.bits != b.value_.bits) return a.value_.bits <=> b.value_.bits;
    return a.value_.compare(b.value_);
  }

  const detail::WideUint& raw() const { return value_; }

 private:
  explicit PeerId(detail::WideUint v) : value_(v) {}
  friend class Distance;
  detail::WideUint value_;
};

/// XOR distance between two identifiers, read as a B-bit integer.
class Distance {
 public:
  Distance() = default;
  Distance(const PeerId& a, const PeerId& b) {
    if (a.bits() != b.bits())
      throw std::invalid_argument("mismatched key widths");
    value_ = a.value_;
    for (int i = 0; i < value_.byte_size(); ++i) value_.b[i] ^= b.value_.b[i];
  }

  bool is_zero() const { return value_.is_zero(); }
  int msb() const { return value_.msb(); }
  int bits() const { return value_.bits; }
  std::uint64_t to_u64() const {
    std::uint64_t v = 0;
    int n = value_.byte_size();
    for (int i = std::max(0, n - 8); i < n; ++i) v = (v << 8) | value_.b[i];
    return v;
  }
  std::string to_hex() const { return value_.to_hex(); }

  friend bool operator==(const Distance& a, const Distance& b) {
    return a.value_.compare(b.value_) == std::strong_ordering::equal;
  }
  friend std::strong_ordering operator<=>(const Distance& a,
                                          const Distance& b) {
    return a.value_.compare(b.value_);
  }

 private:
  detail::WideUint value_;
};

inline Distance xor_distance(const PeerId& a, const PeerId& b) {
  return Distance(a, b);
}

/// Index i of the bucket with distance range [2^i, 2^(i+1)).
inline int bucket_index(const PeerId& local, const PeerId& other) {
  Distance d = xor_distance(local, other);
  int msb = d.msb();
  if (msb < 0)
    throw std::invalid_argument("bucket_index: a node never stores itself");
  return msb;
}

/// Total order of a and b by XOR distance from target.
inline std::strong_ordering closer(const PeerId& target, const PeerId& a,
                                   const PeerId& b) {
  return xor_distance(target, a) <=> xor_distance(target, b);
}

inline void validate_peer_address(std::string_view address) {
  auto at = address.find('@');
  if (at == std::string_view::npos)
    throw std::invalid_argument("peer address must contain '@'");
  if (at == 0) throw std::invalid_argument("peer address local part is empty");
  if (address.find('@', at + 1) != std::string_view::npos)
    throw std::invalid_argument("peer address must contain exactly one '@'");
}

/// Maps a user address (peerX@serverY.com) onto the key space: lowercase the
/// whole string, SHA-1 it, take the first B bits. Widths past 160 bits are
/// filled by chain-hashing the previous digest.
inline PeerId derive_peer_id(std::string_view address,
                             const KademliaParams& params) {
  validate_peer_address(address);
  std::string normalized(address);
  std::transform(normalized.begin(), normalized.end(), normalized.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  std::array<std::uint8_t, 40> stream{};
  auto first = detail::sha1(std::string_view(normalized));
  std::copy(first.begin(), first.end(), stream.begin());
  if (params.bits > 160) {
    auto second = detail::sha1(std::span<const std::uint8_t>(first));
    std::copy(second.begin(), second.end(), stream.begin() + 20);
  }
  int nbytes = (params.bits + 7) / 8;
  detail::WideUint v;
  v.bits = static_cast<std::uint16_t>(params.bits);
  std::copy_n(stream.begin(), nbytes, v.b.begin());
  // "First B bits": when B is not a byte multiple, shift right so the kept
  // bits form the integer value.
  int extra = nbytes * 8 - params.bits;
  if (extra > 0) {
    std::uint8_t carry = 0;
    for (int i = 0; i < nbytes; ++i) {
      std::uint8_t next = static_cast<std::uint8_t>(v.b[i] << (8 - extra));
      v.b[i] = static_cast<std::uint8_t>((v.b[i] >> extra) | carry);
      carry = next;
    }
  }
  v.mask_top();
  return PeerId::from_bytes({v.b.data(), static_cast<std::size_t>(nbytes)},
                            params.bits);
}

}  // namespace iaxkad
