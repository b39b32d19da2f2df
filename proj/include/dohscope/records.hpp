// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dohscope/detail/util.hpp"
#include "dohscope/measurement.hpp"

namespace dohscope {

using nlohmann::json;

enum class RecordKind { doh, ping };

/// One persisted observation: a DoH query attempt or an ICMP round, plus the
/// campaign coordinates it was taken under. Unknown JSON fields survive a
/// load/persist cycle via `extras`.
struct MeasurementRecord {
  RecordKind kind = RecordKind::doh;
  std::string campaign_id;
  int round = 0;
  QueryMeasurement doh;   // meaningful when kind == doh
  PingMeasurement ping;   // meaningful when kind == ping
  json extras;            // unknown input fields, kept verbatim
};

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class SchemaError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline json to_json(const MeasurementRecord& rec) {
  json j = rec.extras.is_object() ? rec.extras : json::object();
  j["kind"] = rec.kind == RecordKind::doh ? "doh" : "ping";
  j["campaign_id"] = rec.campaign_id;
  j["round"] = rec.round;
  if (rec.kind == RecordKind::doh) {
    const auto& m = rec.doh;
    j["vantage"] = m.vantage;
    j["resolver_url"] = m.resolver_url;
    if (!m.domain.empty()) j["domain"] = m.domain;
    j["ts_utc"] = m.ts_utc;
    json timing = json::object();
    if (m.timing.name_resolution_ms) timing["name_resolution_ms"] = *m.timing.name_resolution_ms;
    if (m.timing.tcp_connect_ms) timing["tcp_connect_ms"] = *m.timing.tcp_connect_ms;
    if (m.timing.tls_handshake_ms) timing["tls_handshake_ms"] = *m.timing.tls_handshake_ms;
    if (m.timing.first_byte_ms) timing["first_byte_ms"] = *m.timing.first_byte_ms;
    if (m.timing.total_ms) timing["total_ms"] = *m.timing.total_ms;
    j["timing"] = std::move(timing);
    j["outcome"] = to_string(m.outcome);
    if (m.http_status) j["http_status"] = *m.http_status;
    if (m.rcode) j["rcode"] = *m.rcode;
    if (m.http_version) j["http_version"] = *m.http_version;
    if (m.tls_version) j["tls_version"] = *m.tls_version;
    if (!m.detail.empty()) j["detail"] = m.detail;
  } else {
    const auto& p = rec.ping;
    j["vantage"] = p.vantage;
    j["host"] = p.host;
    j["ts_utc"] = p.ts_utc;
    j["rtts_ms"] = p.rtts_ms;
    if (p.average_ms) j["avg_rtt_ms"] = *p.average_ms;
    j["sent"] = p.sent;
    j["received"] = p.received;
    j["method"] = p.method;
    if (!p.detail.empty()) j["detail"] = p.detail;
  }
  return j;
}

inline MeasurementRecord record_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("record is not a JSON object");
  MeasurementRecord rec;
  auto kind = j.value("kind", "");
  if (kind == "doh") rec.kind = RecordKind::doh;
  else if (kind == "ping") rec.kind = RecordKind::ping;
  else throw SchemaError("unknown record kind: '" + kind + "'");
  rec.campaign_id = j.value("campaign_id", "");
  rec.round = j.value("round", 0);

  std::vector<std::string> known = {"kind", "campaign_id", "round", "vantage", "ts_utc"};
  if (rec.kind == RecordKind::doh) {
    auto& m = rec.doh;
    m.vantage = j.value("vantage", "");
    m.resolver_url = j.value("resolver_url", "");
    m.domain = j.value("domain", "");
    m.ts_utc = j.value("ts_utc", "");
    if (j.contains("timing") && j["timing"].is_object()) {
      const auto& t = j["timing"];
      auto get = [&](const char* key) -> std::optional<double> {
        if (t.contains(key) && t[key].is_number()) return t[key].get<double>();
        return std::nullopt;
      };
      m.timing.name_resolution_ms = get("name_resolution_ms");
      m.timing.tcp_connect_ms = get("tcp_connect_ms");
      m.timing.tls_handshake_ms = get("tls_handshake_ms");
      m.timing.first_byte_ms = get("first_byte_ms");
      m.timing.total_ms = get("total_ms");
    }
    auto outcome = error_class_from_string(j.value("outcome", ""));
    if (!outcome) throw SchemaError("missing or unknown outcome on doh record");
    m.outcome = *outcome;
    if (j.contains("http_status")) m.http_status = j["http_status"].get<int>();
    if (j.contains("rcode")) m.rcode = j["rcode"].get<int>();
    if (j.contains("http_version")) m.http_version = j["http_version"].get<std::string>();
    if (j.contains("tls_version")) m.tls_version = j["tls_version"].get<std::string>();
    m.detail = j.value("detail", "");
    known.insert(known.end(), {"resolver_url", "domain", "timing", "outcome", "http_status",
                               "rcode", "http_version", "tls_version", "detail"});
  } else {
    auto& p = rec.ping;
    p.vantage = j.value("vantage", "");
    p.host = j.value("host", "");
    p.ts_utc = j.value("ts_utc", "");
    if (j.contains("rtts_ms")) p.rtts_ms = j["rtts_ms"].get<std::vector<double>>();
    if (j.contains("avg_rtt_ms")) p.average_ms = j["avg_rtt_ms"].get<double>();
    p.sent = j.value("sent", 0);
    p.received = j.value("received", 0);
    p.method = j.value("method", "icmp");
    p.detail = j.value("detail", "");
    known.insert(known.end(), {"host", "rtts_ms", "avg_rtt_ms", "sent", "received", "method",
                               "detail"});
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      rec.extras[it.key()] = it.value();
  }
  return rec;
}

/// Append-only JSON Lines sink. One record per line, written with a single
/// write(2) and fsynced, so a crash can lose at most the line in flight.
/// Opening an existing file truncates an unterminated tail (a record torn by
/// a crash was never fully persisted), so restarts always append complete
/// lines after complete lines. Thread-safe: any measurement task may hand
/// records to one writer.
class RecordWriter {
public:
  explicit RecordWriter(const std::string& path, bool durable = true) : durable_(durable) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND, 0644);
    if (fd_ < 0) throw IoError("cannot open output file for append: " + path);
    repair_tail();
  }

  ~RecordWriter() { close(); }

  RecordWriter(const RecordWriter&) = delete;
  RecordWriter& operator=(const RecordWriter&) = delete;

  void write(const MeasurementRecord& rec) {
    std::string line = to_json(rec).dump();
    line += '\n';
    std::lock_guard<std::mutex> lock(mutex_);
    if (fd_ < 0) throw IoError("record writer is closed");
    std::size_t off = 0;
    while (off < line.size()) {
      ssize_t n = ::write(fd_, line.data() + off, line.size() - off);
      if (n < 0) throw IoError("write failed");
      off += static_cast<std::size_t>(n);
    }
    if (durable_) ::fdatasync(fd_);
  }

  void close() {
    std::lock_guard<std::mutex> lock(mutex_);
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

private:
  void repair_tail() {
    off_t size = ::lseek(fd_, 0, SEEK_END);
    if (size <= 0) return;
    char last = 0;
    if (::pread(fd_, &last, 1, size - 1) != 1 || last == '\n') return;
    // Scan back to the final newline and drop the torn partial record.
    off_t keep = 0;
    char buf[4096];
    off_t pos = size;
    while (pos > 0 && keep == 0) {
      off_t chunk = std::min<off_t>(pos, static_cast<off_t>(sizeof(buf)));
      pos -= chunk;
      if (::pread(fd_, buf, static_cast<std::size_t>(chunk), pos) != chunk) break;
      for (off_t i = chunk; i-- > 0;) {
        if (buf[i] == '\n') {
          keep = pos + i + 1;
          break;
        }
      }
    }
    if (::ftruncate(fd_, keep) == 0 && durable_) ::fdatasync(fd_);
  }

  int fd_ = -1;
  bool durable_;
  std::mutex mutex_;
};

struct LoadResult {
  std::vector<MeasurementRecord> records;
  std::vector<std::string> warnings;  // e.g. a truncated trailing line
};

/// Loads a JSONL record file. A malformed *final* line is tolerated and
/// reported as a warning (append-crash semantics); malformed lines anywhere
/// else raise SchemaError with the line number.
inline LoadResult load_records_text(std::string_view text, const std::string& origin = "") {
  LoadResult result;
  int line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t eol = text.find('\n', start);
    bool is_last = eol == std::string_view::npos;
    std::string_view line =
        is_last ? text.substr(start) : text.substr(start, eol - start);
    ++line_no;
    std::string_view trimmed = dohscope::detail::trim(line);
    if (!trimmed.empty()) {
      try {
        json j = json::parse(trimmed);
        result.records.push_back(record_from_json(j));
      } catch (const std::exception& e) {
        // Only the final line may be damaged by an interrupted append.
        std::size_t next = is_last ? text.size() : eol + 1;
        bool tail = next >= text.size() ||
                    dohscope::detail::trim(text.substr(next)).empty();
        if (tail) {
          result.warnings.push_back(origin + "line " + std::to_string(line_no) +
                                    ": ignored partial trailing record (" + e.what() + ")");
        } else {
          throw SchemaError(origin + "line " + std::to_string(line_no) + ": " + e.what());
        }
      }
    }
    if (is_last) break;
    start = eol + 1;
  }
  return result;
}

inline LoadResult load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open record file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_records_text(ss.str(), path + ":");
}

}  // namespace dohscope
