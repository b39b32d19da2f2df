// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#include <catch2/catch_amalgamated.hpp>

#include "dohscope/mock/doh_server.hpp"
#include "dohscope/transport.hpp"

using namespace dohscope;
using namespace dohscope::mock;

namespace {

struct Harness {
  PemIdentity ca = make_ca();
  PemIdentity server_id = issue_server_cert(ca);
  std::string ca_path = write_temp_pem(ca.cert_pem, "ca");
  std::vector<std::uint8_t> payload =
      dnswire::encode_query({"google.com", dnswire::kTypeA, dnswire::kClassIn}, 0, true);

  TransportOptions opts() const {
    TransportOptions o;
    o.ca_file = ca_path;
    o.connect_timeout_ms = 3000;
    o.total_timeout_ms = 5000;
    return o;
  }

  ResolverEndpoint endpoint(const MockDohServer& s) const {
    ResolverEndpoint ep;
    ep.url = s.url();
    ep.hostname = "127.0.0.1";
    ep.label = ep.hostname;
    return ep;
  }
};

Harness& harness() {
  static Harness h;
  return h;
}

}  // namespace

TEST_CASE("classify_failure is a deterministic total mapping", "[transport]") {
  auto cls = [](int code, bool connect_done = false, bool tls_done = false) {
    FailureDetail f;
    f.curl_code = code;
    f.connect_done = connect_done;
    f.tls_done = tls_done;
    return classify_failure(f);
  };
  CHECK(cls(CURLE_COULDNT_RESOLVE_HOST) == ErrorClass::NameResolutionFailure);
  CHECK(cls(CURLE_COULDNT_CONNECT) == ErrorClass::CouldNotConnect);
  CHECK(cls(CURLE_SSL_CONNECT_ERROR) == ErrorClass::SslConnectError);
  CHECK(cls(CURLE_PEER_FAILED_VERIFICATION) == ErrorClass::SslCertificateError);
  CHECK(cls(CURLE_SSL_CACERT_BADFILE) == ErrorClass::SslCertificateError);
  CHECK(cls(CURLE_HTTP2) == ErrorClass::Http2FramingError);
  CHECK(cls(CURLE_HTTP2_STREAM) == ErrorClass::Http2FramingError);
  CHECK(cls(CURLE_RECV_ERROR) == ErrorClass::OtherError);
  CHECK(cls(CURLE_GOT_NOTHING) == ErrorClass::OtherError);

  // Timeout attribution is stage-based.
  CHECK(cls(CURLE_OPERATION_TIMEDOUT, false, false) == ErrorClass::CouldNotConnect);
  CHECK(cls(CURLE_OPERATION_TIMEDOUT, true, false) == ErrorClass::SslTimeout);
  CHECK(cls(CURLE_OPERATION_TIMEDOUT, true, true) == ErrorClass::OtherError);

  FailureDetail ok;
  CHECK(classify_failure(ok) == ErrorClass::Success);
  FailureDetail status;
  status.http_status = 500;
  CHECK(classify_failure(status) == ErrorClass::HttpErrorStatus);
  status.http_status = 301;  // redirects are not followed; 3xx is an error status
  CHECK(classify_failure(status) == ErrorClass::HttpErrorStatus);
  FailureDetail decode;
  decode.decode_failed = true;
  CHECK(classify_failure(decode) == ErrorClass::CouldNotDecodeResponse);
  FailureDetail ctype;
  ctype.content_type_not_dns = true;
  CHECK(classify_failure(ctype) == ErrorClass::CouldNotDecodeResponse);
  FailureDetail mismatch;
  mismatch.response_mismatch = true;
  CHECK(classify_failure(mismatch) == ErrorClass::OtherError);
}

TEST_CASE("successful mock query yields Success with monotone phases", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  MockDohServer server(cfg);
  REQUIRE(server.start());

  auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
  INFO(m.detail);
  REQUIRE(m.outcome == ErrorClass::Success);
  REQUIRE(m.rcode.has_value());
  CHECK(*m.rcode == 0);
  REQUIRE(m.timing.total_ms.has_value());
  CHECK(m.timing.name_resolution_ms.has_value());
  CHECK(m.timing.tcp_connect_ms.has_value());
  CHECK(m.timing.tls_handshake_ms.has_value());
  CHECK(m.timing.first_byte_ms.has_value());
  CHECK(m.timing.monotone());
  REQUIRE(m.http_version.has_value());
  CHECK(*m.http_version == "h1");  // mock defaults to ALPN http/1.1
  REQUIRE(m.tls_version.has_value());
  CHECK(*m.tls_version == "1.3");
}

TEST_CASE("cold start: back-to-back queries each pay connect and handshake",
          "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  MockDohServer server(cfg);
  REQUIRE(server.start());

  for (int i = 0; i < 2; ++i) {
    auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
    REQUIRE(m.outcome == ErrorClass::Success);
    REQUIRE(m.timing.tcp_connect_ms.has_value());
    REQUIRE(m.timing.tls_handshake_ms.has_value());
    CHECK(*m.timing.tcp_connect_ms > 0.0);
    CHECK(*m.timing.tls_handshake_ms > *m.timing.tcp_connect_ms);
  }
  CHECK(server.request_count() == 2);
}

TEST_CASE("closed port maps to CouldNotConnect with no TLS phases", "[transport]") {
  auto& h = harness();
  ResolverEndpoint ep;
  ep.url = "https://127.0.0.1:" + std::to_string(MockDohServer::closed_port()) + "/dns-query";
  ep.hostname = "127.0.0.1";
  auto m = measure_doh_query(ep, h.payload, h.opts());
  CHECK(m.outcome == ErrorClass::CouldNotConnect);
  CHECK_FALSE(m.timing.tls_handshake_ms.has_value());
  CHECK_FALSE(m.timing.first_byte_ms.has_value());
  CHECK_FALSE(m.timing.total_ms.has_value());
}

TEST_CASE("HTTP error statuses map to HttpErrorStatus with the code", "[transport]") {
  auto& h = harness();
  for (int code : {404, 500}) {
    MockDohServerConfig cfg;
    cfg.identity = h.server_id;
    cfg.mode = MockMode::http_status;
    cfg.status_code = code;
    MockDohServer server(cfg);
    REQUIRE(server.start());
    auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
    CHECK(m.outcome == ErrorClass::HttpErrorStatus);
    REQUIRE(m.http_status.has_value());
    CHECK(*m.http_status == code);
  }
}

TEST_CASE("undecodable 200 bodies map to CouldNotDecodeResponse", "[transport]") {
  auto& h = harness();
  SECTION("garbage body") {
    MockDohServerConfig cfg;
    cfg.identity = h.server_id;
    cfg.mode = MockMode::garbage_body;
    MockDohServer server(cfg);
    REQUIRE(server.start());
    auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
    CHECK(m.outcome == ErrorClass::CouldNotDecodeResponse);
    CHECK_FALSE(m.http_status.has_value());
  }
  SECTION("wrong content type") {
    MockDohServerConfig cfg;
    cfg.identity = h.server_id;
    cfg.mode = MockMode::wrong_content_type;
    MockDohServer server(cfg);
    REQUIRE(server.start());
    auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
    CHECK(m.outcome == ErrorClass::CouldNotDecodeResponse);
  }
}

TEST_CASE("certificate verification failure maps to SslCertificateError", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;  // fresh self-signed identity, unknown to the client CA
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
  CHECK(m.outcome == ErrorClass::SslCertificateError);
}

TEST_CASE("deadline expiry during the TLS handshake maps to SslTimeout", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.mode = MockMode::hang;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto opts = h.opts();
  opts.connect_timeout_ms = 1000;
  opts.total_timeout_ms = 1000;
  auto m = measure_doh_query(h.endpoint(server), h.payload, opts);
  CHECK(m.outcome == ErrorClass::SslTimeout);
  CHECK(m.timing.tcp_connect_ms.has_value());
  CHECK_FALSE(m.timing.tls_handshake_ms.has_value());
}

TEST_CASE("unresolvable resolver hostname maps to NameResolutionFailure", "[transport]") {
  auto& h = harness();
  ResolverEndpoint ep;
  ep.url = "https://unresolvable-host.invalid/dns-query";
  ep.hostname = "unresolvable-host.invalid";
  auto m = measure_doh_query(ep, h.payload, h.opts());
  CHECK(m.outcome == ErrorClass::NameResolutionFailure);
}

TEST_CASE("h2 stream abort maps to Http2FramingError", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.mode = MockMode::h2_garbage;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
  CHECK(m.outcome == ErrorClass::Http2FramingError);
}

TEST_CASE("empty reply maps to the OtherError catch-all", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.mode = MockMode::empty_close;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
  CHECK(m.outcome == ErrorClass::OtherError);
}

TEST_CASE("a decodable response that answers a different query is rejected",
          "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.mode = MockMode::wrong_id;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
  CHECK(m.outcome == ErrorClass::OtherError);
  CHECK(m.detail.find("match") != std::string::npos);
}

TEST_CASE("negotiation falls back per server capabilities", "[transport]") {
  auto& h = harness();
  SECTION("server pinned to TLS 1.2 and HTTP/1.1") {
    MockDohServerConfig cfg;
    cfg.identity = h.server_id;
    cfg.pin_tls12 = true;
    MockDohServer server(cfg);
    REQUIRE(server.start());
    auto m = negotiate_protocols(h.endpoint(server), h.opts());
    REQUIRE(m.outcome == ErrorClass::Success);
    REQUIRE(m.http_version.has_value());
    REQUIRE(m.tls_version.has_value());
    CHECK(*m.http_version == "h1");
    CHECK(*m.tls_version == "1.2");
  }
  SECTION("server supporting TLS 1.3 and h2") {
    MockDohServerConfig cfg;
    cfg.identity = h.server_id;
    cfg.allow_h2 = true;
    MockDohServer server(cfg);
    REQUIRE(server.start());
    auto m = negotiate_protocols(h.endpoint(server), h.opts());
    REQUIRE(m.outcome == ErrorClass::Success);
    CHECK(*m.http_version == "h2");
    CHECK(*m.tls_version == "1.3");
  }
  SECTION("server rejecting both offered TLS versions") {
    MockDohServerConfig cfg;
    cfg.identity = h.server_id;
    cfg.mode = MockMode::tls_legacy_only;
    MockDohServer server(cfg);
    REQUIRE(server.start());
    auto m = negotiate_protocols(h.endpoint(server), h.opts());
    CHECK(m.outcome == ErrorClass::SslConnectError);
  }
}

TEST_CASE("a session with reuse enabled hits a warm connection", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.keep_alive = true;
  MockDohServer server(cfg);
  REQUIRE(server.start());

  auto opts = h.opts();
  opts.reuse = true;
  DohSession session;
  auto first = session.measure(h.endpoint(server), h.payload, opts);
  REQUIRE(first.outcome == ErrorClass::Success);
  CHECK(first.timing.tls_handshake_ms.has_value());

  auto second = session.measure(h.endpoint(server), h.payload, opts);
  REQUIRE(second.outcome == ErrorClass::Success);
  CHECK_FALSE(second.timing.tls_handshake_ms.has_value());  // no new handshake
  CHECK(second.timing.total_ms.has_value());
  CHECK(server.connection_count() == 1);
  CHECK(server.request_count() == 2);
}

TEST_CASE("GET transport carries the query in the dns parameter", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto opts = h.opts();
  opts.method = HttpMethod::get;
  auto m = measure_doh_query(h.endpoint(server), h.payload, opts);
  REQUIRE(m.outcome == ErrorClass::Success);
  CHECK(*m.rcode == 0);
}

TEST_CASE("response delay is reflected in total time", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.response_delay_ms = 60;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
  REQUIRE(m.outcome == ErrorClass::Success);
  CHECK(*m.timing.total_ms >= 60.0);
}

TEST_CASE("classification is stable across repetitions", "[transport]") {
  auto& h = harness();
  MockDohServerConfig cfg;
  cfg.identity = h.server_id;
  cfg.mode = MockMode::garbage_body;
  MockDohServer server(cfg);
  REQUIRE(server.start());
  for (int i = 0; i < 3; ++i) {
    auto m = measure_doh_query(h.endpoint(server), h.payload, h.opts());
    CHECK(m.outcome == ErrorClass::CouldNotDecodeResponse);
  }
}
