#include <doctest.h>

#include <random>

#include "iaxkad/wire.hpp"

using namespace iaxkad;

TEST_CASE("golden full frame: ACK-style REGACK header") {
  FullFrame f;
  f.source_call = 5;
  f.dest_call = 9;
  f.timestamp_ms = 0;
  f.oseqno = 0;
  f.iseqno = 1;
  f.kind = MessageKind::RegAck;

  std::vector<std::uint8_t> want{0x80, 0x05, 0x00, 0x09, 0x00, 0x00,
                                 0x00, 0x00, 0x00, 0x01, 0x06, 0x0F};
  CHECK(encode_frame(f) == want);

  auto back = decode_frame(want);
  REQUIRE(std::holds_alternative<FullFrame>(back));
  CHECK(std::get<FullFrame>(back) == f);
}

TEST_CASE("golden mini frame") {
  MiniFrame f;
  f.source_call = 5;
  f.timestamp_low = 0x1234;
  f.payload = {0x61, 0x62};
  std::vector<std::uint8_t> want{0x00, 0x05, 0x12, 0x34, 0x61, 0x62};
  CHECK(encode_frame(f) == want);

  auto back = decode_frame(want);
  REQUIRE(std::holds_alternative<MiniFrame>(back));
  const auto& m = std::get<MiniFrame>(back);
  CHECK(m.source_call == 5);
  CHECK(m.timestamp_low == 0x1234);
  CHECK(m.payload == f.payload);
}

TEST_CASE("retransmission flag rides the dest_call high bit") {
  FullFrame f;
  f.source_call = 1;
  f.dest_call = 2;
  f.retransmission = true;
  f.kind = MessageKind::Ping;
  auto bytes = encode_frame(f);
  CHECK(bytes[2] == 0x80);
  CHECK(bytes[3] == 0x02);
  auto back = std::get<FullFrame>(decode_frame(bytes));
  CHECK(back.retransmission);
  CHECK(back.dest_call == 2);
}

TEST_CASE("every kind code survives a round trip") {
  for (std::uint8_t code :
       {0x01, 0x02, 0x03, 0x04, 0x05, 0x07, 0x08, 0x0D, 0x0E, 0x0F, 0x10,
        0x11, 0x20, 0x21, 0x22, 0x23}) {
    FullFrame f;
    f.kind = static_cast<MessageKind>(code);
    auto back = std::get<FullFrame>(decode_frame(encode_frame(f)));
    CHECK(static_cast<std::uint8_t>(back.kind) == code);
  }
}

TEST_CASE("random full frames round trip with IEs") {
  std::mt19937_64 rng(12);
  const MessageKind kinds[] = {MessageKind::New,        MessageKind::RegReq,
                               MessageKind::FindCallees, MessageKind::RegAck,
                               MessageKind::ReplyContacts};
  for (int trial = 0; trial < 200; ++trial) {
    FullFrame f;
    f.source_call = static_cast<std::uint16_t>(rng() & kMaxCallNumber);
    f.dest_call = static_cast<std::uint16_t>(rng() & kMaxCallNumber);
    f.retransmission = rng() & 1;
    f.timestamp_ms = static_cast<std::uint32_t>(rng());
    f.oseqno = static_cast<std::uint8_t>(rng());
    f.iseqno = static_cast<std::uint8_t>(rng());
    f.kind = kinds[rng() % 5];
    int n_ies = static_cast<int>(rng() % 4);
    for (int i = 0; i < n_ies; ++i) {
      InformationElement ie;
      ie.ie_id = static_cast<std::uint8_t>(1 + rng() % 8);
      ie.data.resize(rng() % 60);
      for (auto& b : ie.data) b = static_cast<std::uint8_t>(rng());
      f.body.push_back(std::move(ie));
    }
    auto back = std::get<FullFrame>(decode_frame(encode_frame(f)));
    CHECK(back == f);
  }
}

TEST_CASE("decode failures are distinguishable") {
  auto code_of = [](std::span<const std::uint8_t> bytes) {
    try {
      decode_frame(bytes);
    } catch (const CodecError& e) {
      return e.code;
    }
    return static_cast<CodecError::Code>(-1);
  };

  std::vector<std::uint8_t> one{0x80};
  CHECK(code_of(one) == CodecError::Code::truncated_header);
  std::vector<std::uint8_t> short_mini{0x00, 0x05, 0x12};
  CHECK(code_of(short_mini) == CodecError::Code::truncated_header);
  std::vector<std::uint8_t> short_full{0x80, 0x05, 0x00, 0x09, 0, 0, 0, 0};
  CHECK(code_of(short_full) == CodecError::Code::truncated_header);

  std::vector<std::uint8_t> bad_kind{0x80, 0x05, 0x00, 0x09, 0, 0,
                                     0,    0,    0,    1,    0x06, 0xEE};
  CHECK(code_of(bad_kind) == CodecError::Code::unknown_kind);
  std::vector<std::uint8_t> bad_class{0x80, 0x05, 0x00, 0x09, 0, 0,
                                      0,    0,    0,    1,    0x02, 0x0F};
  CHECK(code_of(bad_class) == CodecError::Code::unknown_kind);

  std::vector<std::uint8_t> overrun{0x80, 0x05, 0x00, 0x09, 0,    0,   0,
                                    0,    0,    1,    0x06, 0x0F, 0x01};
  CHECK(code_of(overrun) == CodecError::Code::ie_overrun);
  std::vector<std::uint8_t> overrun2{0x80, 0x05, 0x00, 0x09, 0,    0,    0, 0,
                                     0,    1,    0x06, 0x0F, 0x01, 0x05, 0xAA};
  CHECK(code_of(overrun2) == CodecError::Code::ie_overrun);

  FullFrame too_long;
  too_long.kind = MessageKind::Ping;
  too_long.body.push_back({0x01, std::vector<std::uint8_t>(300, 0)});
  CHECK_THROWS_AS(encode_frame(too_long), CodecError);
}

TEST_CASE("IE payload helpers round trip") {
  PeerId id = PeerId::from_hex("2d5790e3a7cb8976b181cddbd294c59c7fa3f83a", 160);
  InformationElement ie{static_cast<std::uint8_t>(IeId::PeerIdIe),
                        ie_peer_id(id)};
  CHECK(ie_to_peer_id(ie, 160) == id);

  Endpoint ep{0x0A000001, 4569};
  InformationElement ie2{static_cast<std::uint8_t>(IeId::EndpointIe),
                         ie_endpoint(ep)};
  CHECK(ie_to_endpoint(ie2) == ep);

  InformationElement ie3{static_cast<std::uint8_t>(IeId::FloodIdIe),
                         ie_u64(0x0123456789ABCDEFull)};
  CHECK(ie_to_u64(ie3) == 0x0123456789ABCDEFull);

  InformationElement ie4{static_cast<std::uint8_t>(IeId::AddressIe),
                         ie_string("peerx@servery.com")};
  CHECK(ie_to_string(ie4) == "peerx@servery.com");
}

TEST_CASE("contact lists split across 255-byte IEs and round trip") {
  const int bits = 160;
  std::mt19937_64 rng(3);
  std::vector<Contact> contacts;
  for (int i = 0; i < 25; ++i)  // 25 * 26 bytes > 255: needs several IEs
    contacts.push_back({PeerId::random(rng, bits),
                        Endpoint{static_cast<std::uint32_t>(rng() | 1),
                                 static_cast<std::uint16_t>(1 + (rng() % 65535))},
                        ContactStatus::online, 0, std::nullopt});
  FullFrame f;
  f.kind = MessageKind::ReplyContacts;
  add_contact_list(f, contacts, bits);
  for (const auto& ie : f.body) CHECK(ie.data.size() <= 255);
  CHECK(f.body.size() >= 3);

  auto back = std::get<FullFrame>(decode_frame(encode_frame(f)));
  auto out = contact_list(back, bits);
  REQUIRE(out.size() == contacts.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i].peer_id == contacts[i].peer_id);
    CHECK(out[i].endpoint == contacts[i].endpoint);
  }
}

TEST_CASE("call number allocator hands out the lowest free number") {
  CallNumberAllocator a;
  CHECK(a.allocate() == 1);
  CHECK(a.allocate() == 2);
  CHECK(a.allocate() == 3);
  CHECK(a.allocate() == 4);
  a.release(2);
  CHECK(a.allocate() == 2);
  a.release(1);
  a.release(3);
  CHECK(a.allocate() == 1);
  CHECK(a.allocate() == 3);
  CHECK(a.allocate() == 5);
  CHECK(a.active(4));
  CHECK_FALSE(a.active(6));
}
