// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/ip.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dohscope/detail/util.hpp"
#include "dohscope/measurement.hpp"

namespace dohscope {

class InsufficientPrivilegeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct PingOptions {
  int count = 4;
  std::chrono::milliseconds interval{1000};
  std::chrono::milliseconds per_probe_timeout{2000};
  int payload_size = 56;
  bool allow_tcp_fallback = false;   // off by default so campaigns stay ICMP-only
  std::uint16_t fallback_port = 443;
};

inline double arithmetic_mean(std::span<const double> values) {
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

namespace icmp_detail {

inline std::uint16_t checksum(const std::uint8_t* data, std::size_t len) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i + 1 < len; i += 2) sum += (data[i] << 8) | data[i + 1];
  if (len & 1) sum += data[len - 1] << 8;
  while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

struct IcmpSocket {
  int fd = -1;
  bool raw = false;  // raw sockets deliver the IP header and everyone's ICMP traffic
};

// Prefer the unprivileged ping socket; fall back to a raw socket (root).
inline IcmpSocket open_icmp_socket() {
  IcmpSocket s;
  s.fd = ::socket(AF_INET, SOCK_DGRAM, IPPROTO_ICMP);
  if (s.fd >= 0) return s;
  s.fd = ::socket(AF_INET, SOCK_RAW, IPPROTO_ICMP);
  s.raw = true;
  return s;
}

inline std::uint16_t next_probe_ident() {
  static std::atomic<std::uint16_t> counter{1};
  return static_cast<std::uint16_t>((::getpid() & 0xFF) << 8 | (counter.fetch_add(1) & 0xFF));
}

inline bool resolve_ipv4(const std::string& host, in_addr* out) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) return false;
  *out = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return true;
}

// Waits up to `timeout` for an echo reply matching (ident, seq) from `from`.
// On dgram ping sockets the kernel rewrites the identifier and demultiplexes
// per socket, so only type/seq are checked there.
inline bool await_reply(const IcmpSocket& s, in_addr from, std::uint16_t ident, std::uint16_t seq,
                        std::chrono::steady_clock::time_point deadline, double* rtt_ms,
                        std::chrono::steady_clock::time_point sent_at) {
  std::uint8_t buf[1500];
  while (true) {
    auto now = std::chrono::steady_clock::now();
    if (now >= deadline) return false;
    int wait_ms = static_cast<int>(
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count());
    pollfd pfd{s.fd, POLLIN, 0};
    int pr = ::poll(&pfd, 1, std::max(wait_ms, 1));
    if (pr <= 0) return false;
    sockaddr_in src{};
    socklen_t srclen = sizeof(src);
    ssize_t n = ::recvfrom(s.fd, buf, sizeof(buf), 0, reinterpret_cast<sockaddr*>(&src), &srclen);
    if (n <= 0) continue;
    auto received_at = std::chrono::steady_clock::now();
    std::span<const std::uint8_t> pkt(buf, static_cast<std::size_t>(n));
    if (s.raw) {
      if (pkt.size() < sizeof(ip)) continue;
      std::size_t ihl = (pkt[0] & 0x0F) * 4u;
      if (pkt.size() < ihl + 8) continue;
      pkt = pkt.subspan(ihl);
      if (src.sin_addr.s_addr != from.s_addr) continue;
    }
    if (pkt.size() < 8 || pkt[0] != 0 /* echo reply */) continue;
    std::uint16_t rid = static_cast<std::uint16_t>((pkt[4] << 8) | pkt[5]);
    std::uint16_t rseq = static_cast<std::uint16_t>((pkt[6] << 8) | pkt[7]);
    if (rseq != seq) continue;
    if (s.raw && rid != ident) continue;
    *rtt_ms = std::chrono::duration<double, std::milli>(received_at - sent_at).count();
    return true;
  }
}

}  // namespace icmp_detail

/// Sends `count` ICMP echo requests spaced by `interval` and averages the
/// replies. Resolution failures yield a received=0 record rather than an
/// error; a missing raw-socket privilege throws InsufficientPrivilegeError
/// unless the TCP fallback is enabled.
inline PingMeasurement ping_host(const std::string& host, const PingOptions& opts = {},
                                 const std::string& vantage = "");

/// Measures TCP connect time to (host, port) as an RTT proxy. Records carry
/// method=tcp-fallback and are never mixed with ICMP samples downstream.
inline PingMeasurement tcp_rtt_fallback(const std::string& host, std::uint16_t port,
                                        const PingOptions& opts = {},
                                        const std::string& vantage = "") {
  PingMeasurement m;
  m.host = host;
  m.vantage = vantage;
  m.ts_utc = detail::now_utc_iso8601();
  m.method = "tcp-fallback";

  in_addr addr{};
  if (!icmp_detail::resolve_ipv4(host, &addr)) {
    m.detail = "name resolution failed";
    return m;
  }
  char addr_str[INET_ADDRSTRLEN] = {0};
  inet_ntop(AF_INET, &addr, addr_str, sizeof(addr_str));
  m.detail = std::string("target ") + addr_str + ":" + std::to_string(port);

  for (int i = 0; i < opts.count; ++i) {
    if (i > 0) std::this_thread::sleep_for(opts.interval);
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) {
      ++m.sent;
      continue;
    }
    int fl = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, fl | O_NONBLOCK);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    sa.sin_addr = addr;
    auto t0 = std::chrono::steady_clock::now();
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
    ++m.sent;
    bool ok = false;
    if (rc == 0) {
      ok = true;
    } else if (errno == EINPROGRESS) {
      pollfd pfd{fd, POLLOUT, 0};
      int pr = ::poll(&pfd, 1, static_cast<int>(opts.per_probe_timeout.count()));
      if (pr == 1) {
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        ok = err == 0;
      }
    }
    if (ok) {
      double rtt = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                       .count();
      m.rtts_ms.push_back(rtt);
      ++m.received;
    }
    ::close(fd);
  }
  if (m.received > 0) m.average_ms = arithmetic_mean(m.rtts_ms);
  return m;
}

inline PingMeasurement ping_host(const std::string& host, const PingOptions& opts,
                                 const std::string& vantage) {
  PingMeasurement m;
  m.host = host;
  m.vantage = vantage;
  m.ts_utc = detail::now_utc_iso8601();
  m.method = "icmp";

  icmp_detail::IcmpSocket sock = icmp_detail::open_icmp_socket();
  if (sock.fd < 0) {
    if (opts.allow_tcp_fallback) return tcp_rtt_fallback(host, opts.fallback_port, opts, vantage);
    throw InsufficientPrivilegeError(
        "no ICMP socket available (needs CAP_NET_RAW or a ping-range gid) and fallback disabled");
  }

  in_addr addr{};
  if (!icmp_detail::resolve_ipv4(host, &addr)) {
    ::close(sock.fd);
    m.detail = "name resolution failed";
    return m;
  }
  char addr_str[INET_ADDRSTRLEN] = {0};
  inet_ntop(AF_INET, &addr, addr_str, sizeof(addr_str));
  m.detail = std::string("target ") + addr_str;

  std::uint16_t ident = icmp_detail::next_probe_ident();
  int payload_len = std::max(opts.payload_size, 0);
  std::vector<std::uint8_t> pkt(8 + static_cast<std::size_t>(payload_len), 0x5A);
  for (int seq = 1; seq <= opts.count; ++seq) {
    if (seq > 1) std::this_thread::sleep_for(opts.interval);
    pkt[0] = 8;  // echo request
    pkt[1] = 0;
    pkt[2] = pkt[3] = 0;
    pkt[4] = static_cast<std::uint8_t>(ident >> 8);
    pkt[5] = static_cast<std::uint8_t>(ident & 0xFF);
    pkt[6] = static_cast<std::uint8_t>(seq >> 8);
    pkt[7] = static_cast<std::uint8_t>(seq & 0xFF);
    std::uint16_t csum = icmp_detail::checksum(pkt.data(), pkt.size());
    pkt[2] = static_cast<std::uint8_t>(csum >> 8);
    pkt[3] = static_cast<std::uint8_t>(csum & 0xFF);

    sockaddr_in dst{};
    dst.sin_family = AF_INET;
    dst.sin_addr = addr;
    auto sent_at = std::chrono::steady_clock::now();
    ssize_t sent = ::sendto(sock.fd, pkt.data(), pkt.size(), 0,
                            reinterpret_cast<sockaddr*>(&dst), sizeof(dst));
    ++m.sent;  // send errors count as lost probes, not aborts
    if (sent < 0) continue;
    double rtt = 0;
    auto deadline = sent_at + opts.per_probe_timeout;
    if (icmp_detail::await_reply(sock, addr, ident, static_cast<std::uint16_t>(seq), deadline,
                                 &rtt, sent_at)) {
      m.rtts_ms.push_back(rtt);
      ++m.received;
    }
  }
  ::close(sock.fd);
  if (m.received > 0) m.average_ms = arithmetic_mean(m.rtts_ms);
  return m;
}

}  // namespace dohscope
