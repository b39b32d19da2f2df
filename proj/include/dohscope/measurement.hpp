// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dohscope {

/// Closed outcome taxonomy for one DoH query attempt. Exactly one class per
/// attempt; OtherError is the only catch-all.
enum class ErrorClass {
  Success,
  CouldNotConnect,
  HttpErrorStatus,
  CouldNotDecodeResponse,
  SslConnectError,
  NameResolutionFailure,
  SslCertificateError,
  SslTimeout,
  Http2FramingError,
  OtherError,
};

inline constexpr ErrorClass kAllErrorClasses[] = {
    ErrorClass::Success,          ErrorClass::CouldNotConnect,
    ErrorClass::HttpErrorStatus,  ErrorClass::CouldNotDecodeResponse,
    ErrorClass::SslConnectError,  ErrorClass::NameResolutionFailure,
    ErrorClass::SslCertificateError, ErrorClass::SslTimeout,
    ErrorClass::Http2FramingError, ErrorClass::OtherError,
};

/// Stable identifier used in the JSONL record stream.
inline const char* to_string(ErrorClass c) {
  switch (c) {
    case ErrorClass::Success: return "Success";
    case ErrorClass::CouldNotConnect: return "CouldNotConnect";
    case ErrorClass::HttpErrorStatus: return "HttpErrorStatus";
    case ErrorClass::CouldNotDecodeResponse: return "CouldNotDecodeResponse";
    case ErrorClass::SslConnectError: return "SslConnectError";
    case ErrorClass::NameResolutionFailure: return "NameResolutionFailure";
    case ErrorClass::SslCertificateError: return "SslCertificateError";
    case ErrorClass::SslTimeout: return "SslTimeout";
    case ErrorClass::Http2FramingError: return "Http2FramingError";
    case ErrorClass::OtherError: return "OtherError";
  }
  return "OtherError";
}

/// Human-readable labels matching the published error-table layout.
inline const char* display_name(ErrorClass c) {
  switch (c) {
    case ErrorClass::Success: return "Successful Responses";
    case ErrorClass::CouldNotConnect: return "Couldn't Connect to Server";
    case ErrorClass::HttpErrorStatus: return "HTTP Error Status";
    case ErrorClass::CouldNotDecodeResponse: return "Couldn't Decode Response";
    case ErrorClass::SslConnectError: return "SSL Connect Error";
    case ErrorClass::NameResolutionFailure: return "Couldn't Resolve the Resolver's Domain Name";
    case ErrorClass::SslCertificateError: return "SSL Certificate Error";
    case ErrorClass::SslTimeout: return "SSL Timeout";
    case ErrorClass::Http2FramingError: return "Error in the HTTP/2 Framing Layer";
    case ErrorClass::OtherError: return "Other Error";
  }
  return "Other Error";
}

inline std::optional<ErrorClass> error_class_from_string(std::string_view s) {
  for (ErrorClass c : kAllErrorClasses) {
    if (s == to_string(c)) return c;
  }
  return std::nullopt;
}

/// Cumulative phase timestamps measured from request start on a monotonic
/// clock. A phase is present only on attempts that reached it.
struct TimingBreakdown {
  std::optional<double> name_resolution_ms;
  std::optional<double> tcp_connect_ms;
  std::optional<double> tls_handshake_ms;
  std::optional<double> first_byte_ms;
  std::optional<double> total_ms;

  /// Present phases must be non-decreasing in the listed order.
  bool monotone() const {
    double prev = 0.0;
    for (const auto* phase :
         {&name_resolution_ms, &tcp_connect_ms, &tls_handshake_ms, &first_byte_ms, &total_ms}) {
      if (!phase->has_value()) continue;
      if (**phase < prev) return false;
      prev = **phase;
    }
    return true;
  }
};

/// One DoH query attempt.
struct QueryMeasurement {
  std::string resolver_url;
  std::string vantage;
  std::string domain;
  std::string ts_utc;
  TimingBreakdown timing;
  ErrorClass outcome = ErrorClass::OtherError;
  std::string detail;
  std::optional<int> http_status;          // present iff outcome == HttpErrorStatus
  std::optional<int> rcode;                // present when a DNS body was decoded
  std::optional<std::string> http_version; // "h1" | "h2", when negotiated
  std::optional<std::string> tls_version;  // "1.2" | "1.3" | raw tag, when negotiated
};

/// One ICMP (or TCP-fallback) round of `sent` probes against a host.
struct PingMeasurement {
  std::string host;
  std::string vantage;
  std::string ts_utc;
  std::vector<double> rtts_ms;             // one entry per received reply
  std::optional<double> average_ms;        // arithmetic mean, present iff received >= 1
  int sent = 0;
  int received = 0;
  std::string method = "icmp";             // "icmp" | "tcp-fallback"
  std::string detail;
};

class NoDataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace dohscope
