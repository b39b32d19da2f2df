// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.
//
// Loopback DoH server for tests and local experiments. Wire-level on
// purpose: it can pin TLS versions, steer ALPN, speak just enough HTTP/2 to
// answer one query per connection, and inject each failure mode the
// transport taxonomy distinguishes.

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/err.h>
#include <openssl/ssl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dohscope/dns_wire.hpp"
#include "dohscope/mock/certs.hpp"

namespace dohscope::mock {

enum class MockMode {
  ok,                  // valid DNS answer
  http_status,         // configured non-2xx status with a plain-text body
  garbage_body,        // 200 + application/dns-message body that is not DNS
  wrong_content_type,  // 200 + text/plain carrying valid DNS bytes
  wrong_id,            // valid answer whose message id is off by one
  empty_close,         // read the request, then close without any response
  hang,                // accept TCP and never speak TLS
  tls_legacy_only,     // server speaks only TLS 1.0/1.1
  h2_garbage,          // negotiate h2 via ALPN, then emit invalid framing
};

struct MockDohServerConfig {
  std::uint16_t port = 0;  // 0 = pick an ephemeral port
  MockMode mode = MockMode::ok;
  int status_code = 500;
  bool allow_h2 = false;
  bool pin_tls12 = false;   // cap the server at TLS 1.2
  bool keep_alive = false;  // serve multiple HTTP/1.1 requests per connection
  int response_delay_ms = 0;
  std::string answer_address = "127.0.0.1";  // A record returned in answers
  PemIdentity identity;  // empty -> fresh self-signed localhost cert
};

namespace mock_detail {

inline void append_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v >> 8));
  out.push_back(static_cast<char>(v & 0xFF));
}

inline void append_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v >> 24));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>(v & 0xFF));
}

inline std::string h2_frame(std::uint8_t type, std::uint8_t flags, std::uint32_t stream,
                            std::string_view payload) {
  std::string out;
  out.push_back(static_cast<char>((payload.size() >> 16) & 0xFF));
  out.push_back(static_cast<char>((payload.size() >> 8) & 0xFF));
  out.push_back(static_cast<char>(payload.size() & 0xFF));
  out.push_back(static_cast<char>(type));
  out.push_back(static_cast<char>(flags));
  append_u32(out, stream & 0x7FFFFFFF);
  out.append(payload);
  return out;
}

inline std::vector<std::uint8_t> base64url_decode(std::string_view in) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '-') return 62;
    if (c == '_') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  int acc = 0, bits = 0;
  for (char c : in) {
    int v = value_of(c);
    if (v < 0) break;
    acc = (acc << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace mock_detail

class MockDohServer {
public:
  explicit MockDohServer(MockDohServerConfig config) : config_(std::move(config)) {
    if (config_.identity.cert_pem.empty()) config_.identity = make_self_signed();
  }

  ~MockDohServer() { stop(); }

  bool start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) return false;
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(config_.port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_fd_, 16) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      return false;
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (config_.mode != MockMode::hang && !init_tls()) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      return false;
    }
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    return true;
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : handlers_) {
      if (t.joinable()) t.join();
    }
    handlers_.clear();
    if (ssl_ctx_) {
      SSL_CTX_free(ssl_ctx_);
      ssl_ctx_ = nullptr;
    }
    listen_fd_ = -1;
  }

  std::uint16_t port() const { return port_; }
  std::string url() const {
    return "https://127.0.0.1:" + std::to_string(port_) + "/dns-query";
  }
  int request_count() const { return requests_.load(); }
  int connection_count() const { return connections_.load(); }
  const PemIdentity& identity() const { return config_.identity; }

  /// Reserves and releases an ephemeral port so callers can point a client
  /// at a port where nothing listens.
  static std::uint16_t closed_port() {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ::close(fd);
    return ntohs(addr.sin_port);
  }

private:
  bool init_tls() {
    ssl_ctx_ = SSL_CTX_new(TLS_server_method());
    if (!ssl_ctx_) return false;
    BIO* cbio = BIO_new_mem_buf(config_.identity.cert_pem.data(),
                                static_cast<int>(config_.identity.cert_pem.size()));
    X509* cert = PEM_read_bio_X509(cbio, nullptr, nullptr, nullptr);
    BIO_free(cbio);
    BIO* kbio = BIO_new_mem_buf(config_.identity.key_pem.data(),
                                static_cast<int>(config_.identity.key_pem.size()));
    EVP_PKEY* key = PEM_read_bio_PrivateKey(kbio, nullptr, nullptr, nullptr);
    BIO_free(kbio);
    bool ok = cert && key && SSL_CTX_use_certificate(ssl_ctx_, cert) == 1 &&
              SSL_CTX_use_PrivateKey(ssl_ctx_, key) == 1;
    if (cert) X509_free(cert);
    if (key) EVP_PKEY_free(key);
    if (!ok) return false;
    if (config_.mode == MockMode::tls_legacy_only) {
      SSL_CTX_set_security_level(ssl_ctx_, 0);
      SSL_CTX_set_cipher_list(ssl_ctx_, "ALL:@SECLEVEL=0");
      SSL_CTX_set_min_proto_version(ssl_ctx_, TLS1_VERSION);
      SSL_CTX_set_max_proto_version(ssl_ctx_, TLS1_1_VERSION);
    } else if (config_.pin_tls12) {
      SSL_CTX_set_max_proto_version(ssl_ctx_, TLS1_2_VERSION);
    }
    SSL_CTX_set_alpn_select_cb(
        ssl_ctx_,
        [](SSL*, const unsigned char** out, unsigned char* outlen, const unsigned char* in,
           unsigned int inlen, void* arg) -> int {
          auto* self = static_cast<MockDohServer*>(arg);
          auto pick = [&](std::string_view proto) -> bool {
            for (unsigned int i = 0; i + 1 < inlen && i + 1 + in[i] <= inlen; i += 1 + in[i]) {
              if (std::string_view(reinterpret_cast<const char*>(in + i + 1), in[i]) == proto) {
                *out = in + i + 1;
                *outlen = in[i];
                return true;
              }
            }
            return false;
          };
          bool want_h2 = self->config_.allow_h2 || self->config_.mode == MockMode::h2_garbage;
          if (want_h2 && pick("h2")) return SSL_TLSEXT_ERR_OK;
          if (pick("http/1.1")) return SSL_TLSEXT_ERR_OK;
          return SSL_TLSEXT_ERR_NOACK;
        },
        this);
    return true;
  }

  void accept_loop() {
    while (running_) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) break;
      std::lock_guard<std::mutex> lock(handlers_mutex_);
      handlers_.emplace_back([this, fd] { handle_connection(fd); });
    }
  }

  void handle_connection(int fd) {
    connections_.fetch_add(1);
    timeval tv{0, 100000};  // 100 ms poll so stop() is never blocked on a read
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));

    if (config_.mode == MockMode::hang) {
      char buf[256];
      while (running_) {
        ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
        if (n == 0 || (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK)) break;
      }
      ::close(fd);
      return;
    }

    SSL* ssl = SSL_new(ssl_ctx_);
    SSL_set_fd(ssl, fd);
    bool accepted = false;
    while (running_) {
      int rc = SSL_accept(ssl);
      if (rc == 1) {
        accepted = true;
        break;
      }
      int err = SSL_get_error(ssl, rc);
      if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE) continue;
      break;
    }
    if (accepted) {
      const unsigned char* proto = nullptr;
      unsigned int proto_len = 0;
      SSL_get0_alpn_selected(ssl, &proto, &proto_len);
      bool is_h2 = proto_len == 2 && std::memcmp(proto, "h2", 2) == 0;
      if (is_h2) {
        serve_h2(ssl, config_.mode == MockMode::h2_garbage);
      } else {
        serve_h1(ssl);
      }
      SSL_shutdown(ssl);
    }
    SSL_free(ssl);
    ::close(fd);
  }

  // Blocking-ish SSL_read that tolerates the socket's poll timeout.
  int ssl_read_some(SSL* ssl, char* buf, int cap) {
    while (running_) {
      int n = SSL_read(ssl, buf, cap);
      if (n > 0) return n;
      int err = SSL_get_error(ssl, n);
      if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE) continue;
      return n;
    }
    return 0;
  }

  bool ssl_read_exact(SSL* ssl, std::string& out, std::size_t want) {
    char buf[4096];
    while (out.size() < want) {
      int n = ssl_read_some(ssl, buf, static_cast<int>(std::min(sizeof(buf), want - out.size())));
      if (n <= 0) return false;
      out.append(buf, static_cast<std::size_t>(n));
    }
    return true;
  }

  void apply_delay() {
    if (config_.response_delay_ms > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(config_.response_delay_ms));
  }

  std::string build_answer(const std::vector<std::uint8_t>& query) const {
    std::uint16_t id = 0;
    dnswire::DnsQuestion question{"mock.invalid", dnswire::kTypeA, dnswire::kClassIn};
    bool have_question = false;
    try {
      auto summary = dnswire::decode_response(query);
      id = summary.id;
      if (summary.question_echo) {
        question = *summary.question_echo;
        have_question = true;
      }
    } catch (const dnswire::DecodeError&) {
    }
    if (config_.mode == MockMode::wrong_id) id = static_cast<std::uint16_t>(id + 1);
    std::vector<std::uint8_t> msg;
    if (have_question) {
      msg = dnswire::encode_query(question, id, true);
    } else {
      msg.assign(dnswire::kHeaderLen, 0);
      msg[0] = static_cast<std::uint8_t>(id >> 8);
      msg[1] = static_cast<std::uint8_t>(id & 0xFF);
    }
    msg[2] = 0x81;  // QR + RD
    msg[3] = 0x80;  // RA, rcode 0
    if (have_question) {
      msg[6] = 0;
      msg[7] = 1;  // ANCOUNT = 1
      std::string rr;
      rr += '\xC0';
      rr += '\x0C';  // name: pointer to the question at offset 12
      mock_detail::append_u16(rr, question.qtype);
      mock_detail::append_u16(rr, question.qclass);
      mock_detail::append_u32(rr, 60);  // TTL
      in_addr a{};
      inet_pton(AF_INET, config_.answer_address.c_str(), &a);
      mock_detail::append_u16(rr, 4);
      std::uint32_t ip = ntohl(a.s_addr);
      mock_detail::append_u32(rr, ip);
      msg.insert(msg.end(), rr.begin(), rr.end());
    }
    return std::string(msg.begin(), msg.end());
  }

  struct ResponseParts {
    int status = 200;
    std::string content_type;
    std::string body;
    bool close_without_response = false;
  };

  ResponseParts make_response(const std::vector<std::uint8_t>& query) {
    ResponseParts r;
    switch (config_.mode) {
      case MockMode::ok:
      case MockMode::wrong_id:
        r.content_type = "application/dns-message";
        r.body = build_answer(query);
        break;
      case MockMode::http_status:
        r.status = config_.status_code;
        r.content_type = "text/plain";
        r.body = "mock error\n";
        break;
      case MockMode::garbage_body:
        r.content_type = "application/dns-message";
        r.body = "hello";
        break;
      case MockMode::wrong_content_type:
        r.content_type = "text/plain";
        r.body = build_answer(query);
        break;
      case MockMode::empty_close:
        r.close_without_response = true;
        break;
      default:
        r.close_without_response = true;
        break;
    }
    return r;
  }

  void serve_h1(SSL* ssl) {
    std::string pending;
    do {
      char buf[4096];
      std::size_t header_end;
      while ((header_end = pending.find("\r\n\r\n")) == std::string::npos) {
        int n = ssl_read_some(ssl, buf, sizeof(buf));
        if (n <= 0) return;
        pending.append(buf, static_cast<std::size_t>(n));
        if (pending.size() > 1 << 20) return;
      }
      std::string head = pending.substr(0, header_end);
      pending.erase(0, header_end + 4);
      std::size_t content_length = 0;
      {
        std::string lower;
        lower.reserve(head.size());
        for (char c : head)
          lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        auto pos = lower.find("content-length:");
        if (pos != std::string::npos)
          content_length = std::strtoul(lower.c_str() + pos + 15, nullptr, 10);
      }
      while (pending.size() < content_length) {
        int n = ssl_read_some(ssl, buf, sizeof(buf));
        if (n <= 0) return;
        pending.append(buf, static_cast<std::size_t>(n));
      }
      std::string body = pending.substr(0, content_length);
      pending.erase(0, content_length);
      requests_.fetch_add(1);

      std::vector<std::uint8_t> query;
      if (head.rfind("GET ", 0) == 0) {
        auto dns = head.find("dns=");
        if (dns != std::string::npos) {
          auto end = head.find_first_of(" &", dns + 4);
          query = mock_detail::base64url_decode(
              head.substr(dns + 4, end == std::string::npos ? end : end - (dns + 4)));
        }
      } else {
        query.assign(body.begin(), body.end());
      }

      apply_delay();
      ResponseParts r = make_response(query);
      if (r.close_without_response) return;
      std::string resp = "HTTP/1.1 " + std::to_string(r.status) + " Mock\r\n";
      resp += "Content-Type: " + r.content_type + "\r\n";
      resp += "Content-Length: " + std::to_string(r.body.size()) + "\r\n";
      resp += config_.keep_alive ? "Connection: keep-alive\r\n\r\n" : "Connection: close\r\n\r\n";
      resp += r.body;
      if (SSL_write(ssl, resp.data(), static_cast<int>(resp.size())) <= 0) return;
    } while (config_.keep_alive && running_);
  }

  void serve_h2(SSL* ssl, bool inject_framing_violation = false) {
    using mock_detail::h2_frame;
    std::string buf;
    if (!ssl_read_exact(ssl, buf, 24)) return;  // client connection preface
    std::string settings = h2_frame(0x4, 0x0, 0, "");
    SSL_write(ssl, settings.data(), static_cast<int>(settings.size()));

    std::uint32_t stream_id = 1;
    std::string dns_body;
    bool request_done = false;
    while (!request_done && running_) {
      std::string hdr;
      if (!ssl_read_exact(ssl, hdr, 9)) return;
      std::size_t len = (static_cast<std::uint8_t>(hdr[0]) << 16) |
                        (static_cast<std::uint8_t>(hdr[1]) << 8) | static_cast<std::uint8_t>(hdr[2]);
      std::uint8_t type = static_cast<std::uint8_t>(hdr[3]);
      std::uint8_t flags = static_cast<std::uint8_t>(hdr[4]);
      std::uint32_t stream = ((static_cast<std::uint8_t>(hdr[5]) & 0x7F) << 24) |
                             (static_cast<std::uint8_t>(hdr[6]) << 16) |
                             (static_cast<std::uint8_t>(hdr[7]) << 8) |
                             static_cast<std::uint8_t>(hdr[8]);
      std::string payload;
      if (len > 0 && !ssl_read_exact(ssl, payload, len)) return;
      switch (type) {
        case 0x4:  // SETTINGS
          if (!(flags & 0x1)) {
            std::string ack = h2_frame(0x4, 0x1, 0, "");
            SSL_write(ssl, ack.data(), static_cast<int>(ack.size()));
          }
          break;
        case 0x6: {  // PING
          if (!(flags & 0x1)) {
            std::string pong = h2_frame(0x6, 0x1, 0, payload);
            SSL_write(ssl, pong.data(), static_cast<int>(pong.size()));
          }
          break;
        }
        case 0x1:  // HEADERS (HPACK payload ignored; POST body follows as DATA)
          stream_id = stream;
          if (flags & 0x1) request_done = true;
          break;
        case 0x0: {  // DATA
          std::string_view data = payload;
          if (flags & 0x8) {  // PADDED
            if (data.empty()) return;
            std::uint8_t pad = static_cast<std::uint8_t>(data[0]);
            data.remove_prefix(1);
            if (pad > data.size()) return;
            data.remove_suffix(pad);
          }
          dns_body.append(data);
          if (flags & 0x1) request_done = true;
          break;
        }
        case 0x7:  // GOAWAY
          return;
        default:
          break;  // WINDOW_UPDATE, PRIORITY, ...
      }
    }
    requests_.fetch_add(1);

    apply_delay();
    if (inject_framing_violation) {
      // Abort the request stream with PROTOCOL_ERROR instead of answering.
      std::string payload;
      mock_detail::append_u32(payload, 0x1);
      std::string rst = h2_frame(0x3, 0x0, stream_id, payload);
      SSL_write(ssl, rst.data(), static_cast<int>(rst.size()));
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
      return;
    }
    ResponseParts r = make_response(std::vector<std::uint8_t>(dns_body.begin(), dns_body.end()));
    if (r.close_without_response) return;

    std::string hpack;
    switch (r.status) {  // static-table entries where available
      case 200: hpack += '\x88'; break;
      case 400: hpack += '\x8C'; break;
      case 404: hpack += '\x8D'; break;
      case 500: hpack += '\x8E'; break;
      default: {
        hpack += '\x08';  // literal w/o indexing, name = :status
        std::string v = std::to_string(r.status);
        hpack += static_cast<char>(v.size());
        hpack += v;
      }
    }
    hpack += '\x0F';
    hpack += '\x10';  // literal w/o indexing, name = content-type (static 31)
    hpack += static_cast<char>(r.content_type.size());
    hpack += r.content_type;

    std::string out = h2_frame(0x1, 0x4, stream_id, hpack);          // HEADERS, END_HEADERS
    out += h2_frame(0x0, 0x1, stream_id, r.body);                    // DATA, END_STREAM
    SSL_write(ssl, out.data(), static_cast<int>(out.size()));
  }

  MockDohServerConfig config_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  SSL_CTX* ssl_ctx_ = nullptr;
  std::atomic<bool> running_{false};
  std::atomic<int> requests_{0};
  std::atomic<int> connections_{0};
  std::thread accept_thread_;
  std::mutex handlers_mutex_;
  std::vector<std::thread> handlers_;
};

}  // namespace dohscope::mock
