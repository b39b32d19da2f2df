// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <curl/curl.h>
#include <openssl/ssl.h>

#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dohscope/catalog.hpp"
#include "dohscope/detail/util.hpp"
#include "dohscope/dns_wire.hpp"
#include "dohscope/measurement.hpp"

namespace dohscope {

enum class HttpMethod { post, get };

enum class TlsVersion { v1_2, v1_3 };

/// Per-measurement transport knobs. Defaults follow the cold-path policy:
/// fresh connection, HTTP/2 offered with HTTP/1.1 fallback, TLS 1.3 offered
/// with TLS 1.2 fallback, POST with application/dns-message.
struct TransportOptions {
  long connect_timeout_ms = 5000;
  long total_timeout_ms = 15000;
  HttpMethod method = HttpMethod::post;
  bool reuse = false;                    // reuse=false -> fresh connection per query
  bool offer_http2 = true;               // fall back to HTTP/1.1 when unset or refused
  TlsVersion tls_min = TlsVersion::v1_2;
  std::optional<TlsVersion> tls_max;     // unset -> library maximum (TLS 1.3)
  std::string ca_file;                   // empty -> system trust store
  bool verify_peer = true;
};

/// Everything classify_failure needs to know about one finished attempt.
struct FailureDetail {
  int curl_code = 0;          // CURLcode; 0 means the transfer itself completed
  long http_status = 0;       // final status, 0 if none was received
  bool connect_done = false;  // TCP connect phase completed
  bool tls_done = false;      // TLS handshake phase completed
  bool decode_failed = false; // body present but not a decodable DNS message
  bool content_type_not_dns = false;
  bool response_mismatch = false;  // decoded body does not answer the query
  std::string message;
};

/// Deterministic total mapping from a failed (or completed) attempt to its
/// ErrorClass. Timeout attribution is stage-based: expiry before TCP connect
/// is a connect failure, during the TLS handshake an SSL timeout, later a
/// generic error.
inline ErrorClass classify_failure(const FailureDetail& f) {
  if (f.curl_code == CURLE_OK) {
    if (f.http_status >= 300 && f.http_status <= 599) return ErrorClass::HttpErrorStatus;
    if (f.content_type_not_dns || f.decode_failed) return ErrorClass::CouldNotDecodeResponse;
    if (f.response_mismatch) return ErrorClass::OtherError;
    return ErrorClass::Success;
  }
  switch (f.curl_code) {
    case CURLE_COULDNT_RESOLVE_HOST:
    case CURLE_COULDNT_RESOLVE_PROXY:
      return ErrorClass::NameResolutionFailure;
    case CURLE_COULDNT_CONNECT:
      return ErrorClass::CouldNotConnect;
    case CURLE_SSL_CONNECT_ERROR:
      return ErrorClass::SslConnectError;
    case CURLE_PEER_FAILED_VERIFICATION:  // includes the legacy CACERT code
    case CURLE_SSL_CACERT_BADFILE:
    case CURLE_SSL_ISSUER_ERROR:
    case CURLE_SSL_INVALIDCERTSTATUS:
    case CURLE_SSL_PINNEDPUBKEYNOTMATCH:
      return ErrorClass::SslCertificateError;
    case CURLE_OPERATION_TIMEDOUT:
      if (!f.connect_done) return ErrorClass::CouldNotConnect;
      if (!f.tls_done) return ErrorClass::SslTimeout;
      return ErrorClass::OtherError;
    case CURLE_HTTP2:
    case CURLE_HTTP2_STREAM:
      return ErrorClass::Http2FramingError;
    case CURLE_HTTP_RETURNED_ERROR:
      return ErrorClass::HttpErrorStatus;
    default:
      return ErrorClass::OtherError;
  }
}

namespace transport_detail {

inline void global_init() {
  static std::once_flag flag;
  std::call_once(flag, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
}

inline std::string base64url(std::span<const std::uint8_t> data) {
  static const char alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= data.size(); i += 3) {
    std::uint32_t n = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out += alphabet[(n >> 18) & 63];
    out += alphabet[(n >> 12) & 63];
    out += alphabet[(n >> 6) & 63];
    out += alphabet[n & 63];
  }
  if (i + 1 == data.size()) {
    std::uint32_t n = data[i] << 16;
    out += alphabet[(n >> 18) & 63];
    out += alphabet[(n >> 12) & 63];
  } else if (i + 2 == data.size()) {
    std::uint32_t n = (data[i] << 16) | (data[i + 1] << 8);
    out += alphabet[(n >> 18) & 63];
    out += alphabet[(n >> 12) & 63];
    out += alphabet[(n >> 6) & 63];
  }
  return out;  // unpadded, per the dns= query-parameter convention
}

struct TransferState {
  CURL* handle = nullptr;
  std::string body;
  std::string content_type;
  std::string tls_version;
};

inline std::string map_tls_version(const char* v) {
  std::string s = v ? v : "";
  if (s == "TLSv1.3") return "1.3";
  if (s == "TLSv1.2") return "1.2";
  if (s == "TLSv1.1") return "1.1";
  if (s == "TLSv1") return "1.0";
  return s;
}

// The TLS session pointer is only valid while the transfer is live, so the
// negotiated version is sampled from inside the header callback.
inline void sample_tls_version(TransferState* st) {
  if (!st->tls_version.empty()) return;
  curl_tlssessioninfo* info = nullptr;
  if (curl_easy_getinfo(st->handle, CURLINFO_TLS_SSL_PTR, &info) == CURLE_OK && info &&
      info->backend == CURLSSLBACKEND_OPENSSL && info->internals) {
    st->tls_version = map_tls_version(SSL_get_version(static_cast<SSL*>(info->internals)));
  }
}

inline std::size_t write_cb(char* data, std::size_t size, std::size_t nmemb, void* userdata) {
  auto* st = static_cast<TransferState*>(userdata);
  st->body.append(data, size * nmemb);
  return size * nmemb;
}

inline std::size_t header_cb(char* data, std::size_t size, std::size_t nmemb, void* userdata) {
  auto* st = static_cast<TransferState*>(userdata);
  sample_tls_version(st);
  std::string_view line(data, size * nmemb);
  constexpr std::string_view kPrefix = "content-type:";
  if (line.size() > kPrefix.size() &&
      detail::iequals(line.substr(0, kPrefix.size()), kPrefix)) {
    std::string_view value = detail::trim(line.substr(kPrefix.size()));
    auto semi = value.find(';');
    if (semi != std::string_view::npos) value = detail::trim(value.substr(0, semi));
    st->content_type = detail::to_lower(value);
  }
  return size * nmemb;
}

inline long to_curl_sslversion(TlsVersion v) {
  return v == TlsVersion::v1_3 ? CURL_SSLVERSION_TLSv1_3 : CURL_SSLVERSION_TLSv1_2;
}

inline long to_curl_sslversion_max(TlsVersion v) {
  return v == TlsVersion::v1_3 ? CURL_SSLVERSION_MAX_TLSv1_3 : CURL_SSLVERSION_MAX_TLSv1_2;
}

inline std::optional<double> phase_ms(CURL* h, CURLINFO info, bool force_present) {
  curl_off_t us = 0;
  if (curl_easy_getinfo(h, info, &us) != CURLE_OK) return std::nullopt;
  if (us <= 0 && !force_present) return std::nullopt;
  return static_cast<double>(us) / 1000.0;
}

}  // namespace transport_detail

namespace transport_detail {

inline QueryMeasurement measure_with_handle(CURL* h, const ResolverEndpoint& endpoint,
                                            std::span<const std::uint8_t> payload,
                                            const TransportOptions& opts) {
  using namespace transport_detail;

  QueryMeasurement m;
  m.resolver_url = endpoint.url;
  m.ts_utc = detail::now_utc_iso8601();

  TransferState state;
  state.handle = h;
  char errbuf[CURL_ERROR_SIZE] = {0};
  std::string url = endpoint.url;
  curl_slist* headers = nullptr;
  headers = curl_slist_append(headers, "Accept: application/dns-message");

  if (opts.method == HttpMethod::post) {
    headers = curl_slist_append(headers, "Content-Type: application/dns-message");
    curl_easy_setopt(h, CURLOPT_POST, 1L);
    curl_easy_setopt(h, CURLOPT_POSTFIELDSIZE, static_cast<long>(payload.size()));
    curl_easy_setopt(h, CURLOPT_COPYPOSTFIELDS, reinterpret_cast<const char*>(payload.data()));
  } else {
    url += (url.find('?') == std::string::npos ? "?dns=" : "&dns=") + base64url(payload);
  }

  curl_easy_setopt(h, CURLOPT_URL, url.c_str());
  curl_easy_setopt(h, CURLOPT_HTTPHEADER, headers);
  curl_easy_setopt(h, CURLOPT_PROTOCOLS, CURLPROTO_HTTPS);
  curl_easy_setopt(h, CURLOPT_NOSIGNAL, 1L);
  curl_easy_setopt(h, CURLOPT_CONNECTTIMEOUT_MS, opts.connect_timeout_ms);
  curl_easy_setopt(h, CURLOPT_TIMEOUT_MS, opts.total_timeout_ms);
  curl_easy_setopt(h, CURLOPT_FOLLOWLOCATION, 0L);  // a 3xx is data, not a redirect to chase
  curl_easy_setopt(h, CURLOPT_HTTP_VERSION,
                   opts.offer_http2 ? CURL_HTTP_VERSION_2TLS : CURL_HTTP_VERSION_1_1);
  long sslver = to_curl_sslversion(opts.tls_min);
  if (opts.tls_max) sslver |= to_curl_sslversion_max(*opts.tls_max);
  curl_easy_setopt(h, CURLOPT_SSLVERSION, sslver);
  curl_easy_setopt(h, CURLOPT_SSL_VERIFYPEER, opts.verify_peer ? 1L : 0L);
  curl_easy_setopt(h, CURLOPT_SSL_VERIFYHOST, opts.verify_peer ? 2L : 0L);
  if (!opts.ca_file.empty()) curl_easy_setopt(h, CURLOPT_CAINFO, opts.ca_file.c_str());
  if (!opts.reuse) {
    curl_easy_setopt(h, CURLOPT_FRESH_CONNECT, 1L);
    curl_easy_setopt(h, CURLOPT_FORBID_REUSE, 1L);
  }
  curl_easy_setopt(h, CURLOPT_WRITEFUNCTION, write_cb);
  curl_easy_setopt(h, CURLOPT_WRITEDATA, &state);
  curl_easy_setopt(h, CURLOPT_HEADERFUNCTION, header_cb);
  curl_easy_setopt(h, CURLOPT_HEADERDATA, &state);
  curl_easy_setopt(h, CURLOPT_ERRORBUFFER, errbuf);

  CURLcode rc = curl_easy_perform(h);

  long status = 0;
  curl_easy_getinfo(h, CURLINFO_RESPONSE_CODE, &status);

  // Setup phases are present only when this transfer actually performed
  // them; on a reused connection (NUM_CONNECTS == 0) libcurl reports
  // placeholder timestamps for them, so they are dropped. Delivery phases
  // are always present on a completed transfer.
  bool completed = rc == CURLE_OK;
  long new_connects = 1;
  curl_easy_getinfo(h, CURLINFO_NUM_CONNECTS, &new_connects);
  bool fresh = new_connects > 0 || !completed;
  m.timing.name_resolution_ms = fresh ? phase_ms(h, CURLINFO_NAMELOOKUP_TIME_T, completed)
                                      : std::nullopt;
  m.timing.tcp_connect_ms = fresh ? phase_ms(h, CURLINFO_CONNECT_TIME_T, completed)
                                  : std::nullopt;
  m.timing.tls_handshake_ms = fresh ? phase_ms(h, CURLINFO_APPCONNECT_TIME_T, completed)
                                    : std::nullopt;
  m.timing.first_byte_ms = phase_ms(h, CURLINFO_STARTTRANSFER_TIME_T, completed);
  m.timing.total_ms = completed ? phase_ms(h, CURLINFO_TOTAL_TIME_T, true) : std::nullopt;

  long http_version = 0;
  curl_easy_getinfo(h, CURLINFO_HTTP_VERSION, &http_version);
  if (http_version == CURL_HTTP_VERSION_2_0) m.http_version = "h2";
  else if (http_version != 0) m.http_version = "h1";
  if (!state.tls_version.empty()) m.tls_version = state.tls_version;

  FailureDetail f;
  f.curl_code = rc;
  f.http_status = status;
  f.connect_done = m.timing.tcp_connect_ms.has_value();
  f.tls_done = m.timing.tls_handshake_ms.has_value();
  f.message = errbuf[0] ? errbuf : curl_easy_strerror(rc);

  if (completed && status >= 200 && status < 300) {
    if (!state.content_type.empty() && state.content_type != "application/dns-message") {
      f.content_type_not_dns = true;
      f.message = "unexpected content-type: " + state.content_type;
    } else {
      try {
        auto summary = dnswire::decode_response(
            std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(state.body.data()),
                                          state.body.size()));
        m.rcode = summary.rcode;
        try {
          auto sent = dnswire::decode_response(payload);
          if (!sent.question_echo ||
              !dnswire::response_matches(sent.id, *sent.question_echo, summary)) {
            f.response_mismatch = true;
            f.message = "response does not match query id/question";
          }
        } catch (const dnswire::DecodeError&) {
          // Payload not introspectable; skip the match validation.
        }
      } catch (const dnswire::DecodeError& e) {
        f.decode_failed = true;
        f.message = e.what();
      }
    }
  }

  m.outcome = classify_failure(f);
  if (m.outcome == ErrorClass::HttpErrorStatus) {
    m.http_status = static_cast<int>(status);
    m.detail = "HTTP status " + std::to_string(status);
  } else if (m.outcome != ErrorClass::Success) {
    m.detail = f.message;
  }

  curl_slist_free_all(headers);
  curl_easy_reset(h);
  return m;
}

}  // namespace transport_detail

/// Executes one DoH query against `endpoint` with the given options over a
/// fresh connection. Never throws for network-level failures: every failure
/// mode is absorbed into the returned measurement's outcome. vantage/domain
/// fields beyond the transport's knowledge are left for the caller to fill.
inline QueryMeasurement measure_doh_query(const ResolverEndpoint& endpoint,
                                          std::span<const std::uint8_t> payload,
                                          const TransportOptions& opts) {
  transport_detail::global_init();
  CURL* h = curl_easy_init();
  if (!h) {
    QueryMeasurement m;
    m.resolver_url = endpoint.url;
    m.ts_utc = detail::now_utc_iso8601();
    m.outcome = ErrorClass::OtherError;
    m.detail = "curl_easy_init failed";
    return m;
  }
  auto m = transport_detail::measure_with_handle(h, endpoint, payload, opts);
  curl_easy_cleanup(h);
  return m;
}

/// Holds one transport handle across measurements so that opts.reuse can
/// actually hit a warm connection (the handle's connection cache survives
/// between calls). Not thread-safe; use one session per task.
class DohSession {
public:
  DohSession() {
    transport_detail::global_init();
    handle_ = curl_easy_init();
  }
  ~DohSession() {
    if (handle_) curl_easy_cleanup(handle_);
  }
  DohSession(const DohSession&) = delete;
  DohSession& operator=(const DohSession&) = delete;

  QueryMeasurement measure(const ResolverEndpoint& endpoint,
                           std::span<const std::uint8_t> payload, const TransportOptions& opts) {
    if (!handle_) {
      QueryMeasurement m;
      m.resolver_url = endpoint.url;
      m.outcome = ErrorClass::OtherError;
      m.detail = "curl_easy_init failed";
      return m;
    }
    return transport_detail::measure_with_handle(handle_, endpoint, payload, opts);
  }

private:
  CURL* handle_ = nullptr;
};

/// Probes which HTTP and TLS versions an endpoint negotiates under the
/// standard fallback policy (h2 -> http/1.1, TLS 1.3 -> 1.2). Returns the
/// full measurement; negotiated versions are in http_version / tls_version.
inline QueryMeasurement negotiate_protocols(const ResolverEndpoint& endpoint,
                                            const TransportOptions& opts) {
  auto payload = dnswire::encode_query({"example.com", dnswire::kTypeA, dnswire::kClassIn}, 0);
  return measure_doh_query(endpoint, payload, opts);
}

}  // namespace dohscope
