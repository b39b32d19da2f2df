// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dohscope/detail/util.hpp"

namespace dohscope::dnswire {

inline constexpr std::uint16_t kTypeA = 1;
inline constexpr std::uint16_t kClassIn = 1;

// Presentation-form limits: each label 1..63 octets, whole name at most
// 253 characters (255 octets once length bytes and the root label are added).
inline constexpr std::size_t kMaxLabelLen = 63;
inline constexpr std::size_t kMaxNameLen = 253;
inline constexpr std::size_t kHeaderLen = 12;

class InvalidNameError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class DecodeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// One question entry: dot-separated name plus 16-bit type/class codes.
struct DnsQuestion {
  std::string name;
  std::uint16_t qtype = kTypeA;
  std::uint16_t qclass = kClassIn;

  // DNS names compare case-insensitively (RFC 1035 §2.3.3).
  friend bool operator==(const DnsQuestion& a, const DnsQuestion& b) {
    return a.qtype == b.qtype && a.qclass == b.qclass && detail::iequals(a.name, b.name);
  }
};

/// Header-level summary of a decoded DNS message. Answer RDATA is never
/// parsed; answer_count simply echoes ANCOUNT.
struct DnsResponseSummary {
  std::uint16_t id = 0;
  std::uint8_t rcode = 0;
  std::uint16_t answer_count = 0;
  bool qr_flag = false;
  std::optional<DnsQuestion> question_echo;  // absent when QDCOUNT is 0
};

struct EncodeOptions {
  bool recursion_desired = true;
  // When set, appends a minimal EDNS(0) OPT pseudo-record advertising the
  // given UDP payload size (ARCOUNT becomes 1).
  bool edns0 = false;
  std::uint16_t edns_udp_size = 4096;
};

namespace wire_detail {

inline void append_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

// Splits a presentation-form name into labels, enforcing the DnsQuestion
// invariants. A single trailing dot (FQDN form) is accepted; "." is the root.
inline std::vector<std::string> name_to_labels(const std::string& name) {
  if (name.empty()) throw InvalidNameError("empty domain name");
  if (name == ".") return {};
  std::string_view view = name;
  if (view.back() == '.') view.remove_suffix(1);
  if (view.empty()) throw InvalidNameError("empty domain name");
  if (view.size() > kMaxNameLen)
    throw InvalidNameError("domain name exceeds 253 octets: " + name);
  std::vector<std::string> labels;
  std::size_t start = 0;
  while (start <= view.size()) {
    std::size_t dot = view.find('.', start);
    std::string_view label =
        dot == std::string_view::npos ? view.substr(start) : view.substr(start, dot - start);
    if (label.empty()) throw InvalidNameError("empty label in domain name: " + name);
    if (label.size() > kMaxLabelLen)
      throw InvalidNameError("label exceeds 63 octets in: " + name);
    for (unsigned char c : label) {
      if (c <= 0x20 || c >= 0x7F)
        throw InvalidNameError("non-ASCII or control character in domain name: " + name);
    }
    labels.emplace_back(label);
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return labels;
}

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> buf) : buf_(buf) {}

  std::uint8_t u8(std::size_t at) const {
    if (at >= buf_.size()) throw DecodeError("message truncated");
    return buf_[at];
  }
  std::uint16_t u16(std::size_t at) const {
    if (at + 1 >= buf_.size()) throw DecodeError("message truncated");
    return static_cast<std::uint16_t>((buf_[at] << 8) | buf_[at + 1]);
  }
  std::size_t size() const { return buf_.size(); }

  // Reads a (possibly compressed) name starting at `pos`, returning the
  // presentation form and advancing `pos` past the name as laid out in the
  // message. Pointer chains are bounded to reject loops.
  std::string name(std::size_t& pos) const {
    std::string out;
    std::size_t cursor = pos;
    std::size_t after_first_pointer = 0;
    bool jumped = false;
    int jumps = 0;
    std::size_t assembled = 0;
    while (true) {
      std::uint8_t len = u8(cursor);
      if ((len & 0xC0) == 0xC0) {
        std::size_t target = static_cast<std::size_t>((len & 0x3F) << 8) | u8(cursor + 1);
        if (!jumped) after_first_pointer = cursor + 2;
        jumped = true;
        if (++jumps > 64) throw DecodeError("compression pointer loop");
        if (target >= buf_.size()) throw DecodeError("compression pointer out of range");
        cursor = target;
        continue;
      }
      if ((len & 0xC0) != 0) throw DecodeError("reserved label type");
      if (len == 0) {
        cursor += 1;
        break;
      }
      if (cursor + 1 + len > buf_.size()) throw DecodeError("label truncated");
      assembled += len + 1;
      if (assembled > 255) throw DecodeError("decoded name exceeds 255 octets");
      if (!out.empty()) out += '.';
      out.append(reinterpret_cast<const char*>(buf_.data() + cursor + 1), len);
      cursor += 1 + len;
    }
    pos = jumped ? after_first_pointer : cursor;
    return out.empty() ? "." : out;
  }

private:
  std::span<const std::uint8_t> buf_;
};

}  // namespace wire_detail

/// Checks a presentation-form name against the DnsQuestion invariants,
/// throwing InvalidNameError with context when violated.
inline void validate_name(const std::string& name) { wire_detail::name_to_labels(name); }

/// Encodes a single-question RFC 1035 query message. Pure and deterministic;
/// the encoder never emits compression pointers.
inline std::vector<std::uint8_t> encode_query(const DnsQuestion& question, std::uint16_t id,
                                              const EncodeOptions& opts) {
  auto labels = wire_detail::name_to_labels(question.name);
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderLen + question.name.size() + 6 + (opts.edns0 ? 11 : 0));
  wire_detail::append_u16(out, id);
  std::uint16_t flags = opts.recursion_desired ? 0x0100 : 0x0000;
  wire_detail::append_u16(out, flags);
  wire_detail::append_u16(out, 1);  // QDCOUNT
  wire_detail::append_u16(out, 0);  // ANCOUNT
  wire_detail::append_u16(out, 0);  // NSCOUNT
  wire_detail::append_u16(out, opts.edns0 ? 1 : 0);  // ARCOUNT
  for (const auto& label : labels) {
    out.push_back(static_cast<std::uint8_t>(label.size()));
    out.insert(out.end(), label.begin(), label.end());
  }
  out.push_back(0);
  wire_detail::append_u16(out, question.qtype);
  wire_detail::append_u16(out, question.qclass);
  if (opts.edns0) {
    out.push_back(0);                                   // root owner name
    wire_detail::append_u16(out, 41);                   // OPT
    wire_detail::append_u16(out, opts.edns_udp_size);   // class = UDP size
    wire_detail::append_u16(out, 0);                    // TTL high (ext rcode/version)
    wire_detail::append_u16(out, 0);                    // TTL low
    wire_detail::append_u16(out, 0);                    // RDLENGTH
  }
  return out;
}

inline std::vector<std::uint8_t> encode_query(const DnsQuestion& question, std::uint16_t id,
                                              bool recursion_desired = true) {
  EncodeOptions opts;
  opts.recursion_desired = recursion_desired;
  return encode_query(question, id, opts);
}

/// Parses the header and question section of a DNS message. Total on
/// arbitrary input: returns a summary or throws DecodeError, never reads out
/// of bounds. Compression pointers in echoed names are tolerated.
inline DnsResponseSummary decode_response(std::span<const std::uint8_t> body) {
  if (body.size() < kHeaderLen) throw DecodeError("message shorter than 12-byte header");
  wire_detail::Reader r(body);
  DnsResponseSummary summary;
  summary.id = r.u16(0);
  std::uint16_t flags = r.u16(2);
  summary.qr_flag = (flags & 0x8000) != 0;
  summary.rcode = static_cast<std::uint8_t>(flags & 0x000F);
  std::uint16_t qdcount = r.u16(4);
  summary.answer_count = r.u16(6);
  std::size_t pos = kHeaderLen;
  for (std::uint16_t i = 0; i < qdcount; ++i) {
    DnsQuestion q;
    q.name = r.name(pos);
    q.qtype = r.u16(pos);
    q.qclass = r.u16(pos + 2);
    pos += 4;
    if (i == 0) summary.question_echo = std::move(q);
  }
  return summary;
}

inline DnsResponseSummary decode_response(const std::vector<std::uint8_t>& body) {
  return decode_response(std::span<const std::uint8_t>(body));
}

/// True iff `response` answers the query identified by (query_id, question):
/// matching id, QR set, and a case-insensitively equal echoed question.
inline bool response_matches(std::uint16_t query_id, const DnsQuestion& question,
                             const DnsResponseSummary& response) {
  return response.id == query_id && response.qr_flag && response.question_echo.has_value() &&
         *response.question_echo == question;
}

}  // namespace dohscope::dnswire
