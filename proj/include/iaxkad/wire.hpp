#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "iaxkad/contact.hpp"
#include "iaxkad/peer_id.hpp"

namespace iaxkad {

enum class MessageKind : std::uint8_t {
  New = 0x01,
  Ping = 0x02,
  Pong = 0x03,
  Ack = 0x04,
  Hangup = 0x05,
  Accept = 0x07,
  Answer = 0x08,
  RegReq = 0x0D,
  RegAuth = 0x0E,
  RegAck = 0x0F,
  RegRej = 0x10,
  RegRel = 0x11,
  FindCallees = 0x20,
  FindCallee = 0x21,
  ReplyContacts = 0x22,
  ReplyCallee = 0x23,
};

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::New: return "NEW";
    case MessageKind::Ping: return "PING";
    case MessageKind::Pong: return "PONG";
    case MessageKind::Ack: return "ACK";
    case MessageKind::Hangup: return "HANGUP";
    case MessageKind::Accept: return "ACCEPT";
    case MessageKind::Answer: return "ANSWER";
    case MessageKind::RegReq: return "REGREQ";
    case MessageKind::RegAuth: return "REGAUTH";
    case MessageKind::RegAck: return "REGACK";
    case MessageKind::RegRej: return "REGREJ";
    case MessageKind::RegRel: return "REGREL";
    case MessageKind::FindCallees: return "FIND_CALLEES";
    case MessageKind::FindCallee: return "FIND_CALLEE";
    case MessageKind::ReplyContacts: return "REPLY_CONTACTS";
    case MessageKind::ReplyCallee: return "REPLY_CALLEE";
  }
  return "?";
}

inline bool is_valid_kind(std::uint8_t code) {
  static const std::set<std::uint8_t> codes = {
      0x01, 0x02, 0x03, 0x04, 0x05, 0x07, 0x08, 0x0D,
      0x0E, 0x0F, 0x10, 0x11, 0x20, 0x21, 0x22, 0x23};
  return codes.count(code) != 0;
}

enum class IeId : std::uint8_t {
  PeerIdIe = 0x01,
  EndpointIe = 0x02,
  AddressIe = 0x03,
  ContactListIe = 0x04,
  TargetKeyIe = 0x05,
  CauseIe = 0x06,
  FloodIdIe = 0x07,
  HopCountIe = 0x08,
};

struct InformationElement {
  std::uint8_t ie_id = 0;
  std::vector<std::uint8_t> data;

  friend bool operator==(const InformationElement&,
                         const InformationElement&) = default;
};

struct CodecError : std::runtime_error {
  enum class Code { truncated_header, unknown_kind, ie_overrun, ie_too_long };
  CodecError(Code c, const std::string& what)
      : std::runtime_error(what), code(c) {}
  Code code;
};

constexpr std::uint8_t kOverlayFrameClass = 0x06;
constexpr std::size_t kFullHeaderSize = 12;
constexpr std::size_t kMiniHeaderSize = 4;
constexpr std::uint16_t kMaxCallNumber = 0x7FFF;

/// Reliable control frame: retransmitted until acknowledged.
struct FullFrame {
  std::uint16_t source_call = 0;  // 0 = sessionless overlay query
  std::uint16_t dest_call = 0;
  bool retransmission = false;
  std::uint32_t timestamp_ms = 0;
  std::uint8_t oseqno = 0;
  std::uint8_t iseqno = 0;
  MessageKind kind = MessageKind::Ack;
  std::vector<InformationElement> body;

  const InformationElement* find_ie(IeId id) const {
    for (const auto& ie : body)
      if (ie.ie_id == static_cast<std::uint8_t>(id)) return &ie;
    return nullptr;
  }

  void add_ie(IeId id, std::vector<std::uint8_t> data) {
    body.push_back({static_cast<std::uint8_t>(id), std::move(data)});
  }

  friend bool operator==(const FullFrame&, const FullFrame&) = default;
};

/// Unreliable media frame: never retransmitted, never acknowledged.
struct MiniFrame {
  std::uint16_t source_call = 0;
  std::uint16_t timestamp_low = 0;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const MiniFrame&, const MiniFrame&) = default;
};

using Frame = std::variant<FullFrame, MiniFrame>;

namespace detail {
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
inline std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint16_t>((in[at] << 8) | in[at + 1]);
}
inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  return (std::uint32_t{in[at]} << 24) | (std::uint32_t{in[at + 1]} << 16) |
         (std::uint32_t{in[at + 2]} << 8) | std::uint32_t{in[at + 3]};
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_frame(const FullFrame& f) {
  std::vector<std::uint8_t> out;
  detail::put_u16(out, static_cast<std::uint16_t>(0x8000 | f.source_call));
  detail::put_u16(out, static_cast<std::uint16_t>(
                           (f.retransmission ? 0x8000 : 0) | f.dest_call));
  detail::put_u32(out, f.timestamp_ms);
  out.push_back(f.oseqno);
  out.push_back(f.iseqno);
  out.push_back(kOverlayFrameClass);
  out.push_back(static_cast<std::uint8_t>(f.kind));
  for (const auto& ie : f.body) {
    if (ie.data.size() > 255)
      throw CodecError(CodecError::Code::ie_too_long,
                       "information element data over 255 bytes");
    out.push_back(ie.ie_id);
    out.push_back(static_cast<std::uint8_t>(ie.data.size()));
    out.insert(out.end(), ie.data.begin(), ie.data.end());
  }
  return out;
}

inline std::vector<std::uint8_t> encode_frame(const MiniFrame& f) {
  std::vector<std::uint8_t> out;
  detail::put_u16(out, static_cast<std::uint16_t>(f.source_call & 0x7FFF));
  detail::put_u16(out, f.timestamp_low);
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  return std::visit([](const auto& v) { return encode_frame(v); }, f);
}

inline Frame decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2)
    throw CodecError(CodecError::Code::truncated_header, "truncated header");
  bool full = (bytes[0] & 0x80) != 0;
  if (!full) {
    if (bytes.size() < kMiniHeaderSize)
      throw CodecError(CodecError::Code::truncated_header,
                       "truncated mini-frame header");
    MiniFrame f;
    f.source_call = detail::get_u16(bytes, 0) & 0x7FFF;
    f.timestamp_low = detail::get_u16(bytes, 2);
    f.payload.assign(bytes.begin() + kMiniHeaderSize, bytes.end());
    return f;
  }
  if (bytes.size() < kFullHeaderSize)
    throw CodecError(CodecError::Code::truncated_header,
                     "truncated full-frame header");
  if (bytes[10] != kOverlayFrameClass)
    throw CodecError(CodecError::Code::unknown_kind, "unknown frame class");
  if (!is_valid_kind(bytes[11]))
    throw CodecError(CodecError::Code::unknown_kind, "unknown kind code");
  FullFrame f;
  f.source_call = detail::get_u16(bytes, 0) & 0x7FFF;
  std::uint16_t d = detail::get_u16(bytes, 2);
  f.retransmission = (d & 0x8000) != 0;
  f.dest_call = d & 0x7FFF;
  f.timestamp_ms = detail::get_u32(bytes, 4);
  f.oseqno = bytes[8];
  f.iseqno = bytes[9];
  f.kind = static_cast<MessageKind>(bytes[11]);
  std::size_t at = kFullHeaderSize;
  while (at < bytes.size()) {
    if (at + 2 > bytes.size())
      throw CodecError(CodecError::Code::ie_overrun,
                       "truncated information element header");
    std::uint8_t id = bytes[at];
    std::uint8_t len = bytes[at + 1];
    at += 2;
    if (at + len > bytes.size())
      throw CodecError(CodecError::Code::ie_overrun,
                       "information element past end of frame");
    InformationElement ie;
    ie.ie_id = id;
    ie.data.assign(bytes.begin() + at, bytes.begin() + at + len);
    f.body.push_back(std::move(ie));
    at += len;
  }
  return f;
}

// ---- IE payload helpers -------------------------------------------------

inline std::vector<std::uint8_t> ie_peer_id(const PeerId& id) {
  auto b = id.bytes();
  return {b.begin(), b.end()};
}

inline PeerId ie_to_peer_id(const InformationElement& ie, int bits) {
  return PeerId::from_bytes(ie.data, bits);
}

inline std::vector<std::uint8_t> ie_endpoint(const Endpoint& ep) {
  std::vector<std::uint8_t> out;
  detail::put_u32(out, ep.host);
  detail::put_u16(out, ep.port);
  return out;
}

inline Endpoint ie_to_endpoint(const InformationElement& ie) {
  if (ie.data.size() != 6) throw std::invalid_argument("bad endpoint IE");
  return {detail::get_u32(ie.data, 0), detail::get_u16(ie.data, 4)};
}

inline std::vector<std::uint8_t> ie_u64(std::uint64_t v) {
  std::vector<std::uint8_t> out(8);
  for (int i = 0; i < 8; ++i)
    out[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(v >> (56 - 8 * i));
  return out;
}

inline std::uint64_t ie_to_u64(const InformationElement& ie) {
  if (ie.data.size() != 8) throw std::invalid_argument("bad u64 IE");
  std::uint64_t v = 0;
  for (auto byte : ie.data) v = (v << 8) | byte;
  return v;
}

inline std::vector<std::uint8_t> ie_string(std::string_view s) {
  return {s.begin(), s.end()};
}

inline std::string ie_to_string(const InformationElement& ie) {
  return {ie.data.begin(), ie.data.end()};
}

/// Contact records are fixed width: id bytes + 4-byte host + 2-byte port.
/// Lists longer than one IE allows are split across CONTACT_LIST IEs.
inline std::size_t contact_record_size(int bits) {
  return static_cast<std::size_t>((bits + 7) / 8) + 6;
}

inline void add_contact_list(FullFrame& f, std::span<const Contact> contacts,
                             int bits) {
  std::size_t record = contact_record_size(bits);
  std::size_t per_ie = 255 / record;
  std::vector<std::uint8_t> data;
  for (std::size_t i = 0; i < contacts.size(); ++i) {
    const Contact& c = contacts[i];
    auto idb = c.peer_id.bytes();
    data.insert(data.end(), idb.begin(), idb.end());
    detail::put_u32(data, c.endpoint.host);
    detail::put_u16(data, c.endpoint.port);
    if (data.size() / record == per_ie || i + 1 == contacts.size()) {
      f.add_ie(IeId::ContactListIe, std::move(data));
      data.clear();
    }
  }
}

inline std::vector<Contact> contact_list(const FullFrame& f, int bits) {
  std::size_t record = contact_record_size(bits);
  std::size_t idb = static_cast<std::size_t>((bits + 7) / 8);
  std::vector<Contact> out;
  for (const auto& ie : f.body) {
    if (ie.ie_id != static_cast<std::uint8_t>(IeId::ContactListIe)) continue;
    if (ie.data.size() % record != 0)
      throw std::invalid_argument("ragged contact list IE");
    for (std::size_t at = 0; at < ie.data.size(); at += record) {
      Contact c;
      c.peer_id = PeerId::from_bytes(
          std::span<const std::uint8_t>(ie.data).subspan(at, idb), bits);
      c.endpoint.host = detail::get_u32(ie.data, at + idb);
      c.endpoint.port = detail::get_u16(ie.data, at + idb + 4);
      out.push_back(std::move(c));
    }
  }
  return out;
}

/// Lowest-free allocator for 15-bit call numbers.
class CallNumberAllocator {
 public:
  std::uint16_t allocate() {
    for (std::uint16_t n = 1; n <= kMaxCallNumber; ++n) {
      if (!in_use_.count(n)) {
        in_use_.insert(n);
        return n;
      }
    }
    throw std::runtime_error("call numbers exhausted");
  }

  void release(std::uint16_t n) { in_use_.erase(n); }
  bool active(std::uint16_t n) const { return in_use_.count(n) != 0; }
  std::size_t active_count() const { return in_use_.size(); }

 private:
  std::set<std::uint16_t> in_use_;
};

}  // namespace iaxkad
