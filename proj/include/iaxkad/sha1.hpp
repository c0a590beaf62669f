#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace iaxkad::detail {

/// Minimal SHA-1 (FIPS 180-4). Used only for key derivation, not security.
class Sha1 {
 public:
  Sha1() { reset(); }

  void reset() {
    h_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
    total_ = 0;
    buffered_ = 0;
  }

  void update(std::span<const std::uint8_t> data) {
    total_ += data.size();
    for (std::uint8_t byte : data) {
      buf_[buffered_++] = byte;
      if (buffered_ == 64) {
        process_block();
        buffered_ = 0;
      }
    }
  }

  std::array<std::uint8_t, 20> digest() {
    std::uint64_t bit_len = total_ * 8;
    std::uint8_t pad = 0x80;
    update({&pad, 1});
    const std::uint8_t zero = 0;
    while (buffered_ != 56) update({&zero, 1});
    std::array<std::uint8_t, 8> len{};
    for (int i = 0; i < 8; ++i)
      len[i] = static_cast<std::uint8_t>(bit_len >> (56 - 8 * i));
    update(len);
    std::array<std::uint8_t, 20> out{};
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 4; ++j)
        out[4 * i + j] = static_cast<std::uint8_t>(h_[i] >> (24 - 8 * j));
    return out;
  }

 private:
  static std::uint32_t rotl(std::uint32_t v, int n) {
    return (v << n) | (v >> (32 - n));
  }

  void process_block() {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = (std::uint32_t{buf_[4 * i]} << 24) |
             (std::uint32_t{buf_[4 * i + 1]} << 16) |
             (std::uint32_t{buf_[4 * i + 2]} << 8) |
             std::uint32_t{buf_[4 * i + 3]};
    for (int i = 16; i < 80; ++i)
      w[i] = rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);

    std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, kc;
      if (i < 20) {
        f = (b & c) | (~b & d);
        kc = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        kc = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        kc = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        kc = 0xCA62C1D6u;
      }
      std::uint32_t tmp = rotl(a, 5) + f + e + kc + w[i];
      e = d;
      d = c;
      c = rotl(b, 30);
      b = a;
      a = tmp;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  std::array<std::uint32_t, 5> h_{};
  std::uint8_t buf_[64]{};
  std::uint64_t total_ = 0;
  std::size_t buffered_ = 0;
};

inline std::array<std::uint8_t, 20> sha1(std::string_view data) {
  Sha1 h;
  h.update({reinterpret_cast<const std::uint8_t*>(data.data()), data.size()});
  return h.digest();
}

inline std::array<std::uint8_t, 20> sha1(std::span<const std::uint8_t> data) {
  Sha1 h;
  h.update(data);
  return h.digest();
}

}  // namespace iaxkad::detail
